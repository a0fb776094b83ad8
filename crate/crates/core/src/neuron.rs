//! Leaky integrate-and-fire dynamics, forward Euler with subtractive reset.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::{Signal, SpikeTrain};

/// Membrane and synaptic constants shared by every cell of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronParams {
    pub tau_m_ms: f64,
    pub tau_s_ms: f64,
    /// Firing threshold; a spike subtracts exactly this much from `u`.
    pub theta: f64,
    pub v_rest: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            tau_m_ms: 50.0,
            tau_s_ms: 20.0,
            theta: 1.0,
            v_rest: 0.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m_ms > 0.0 && self.tau_m_ms.is_finite()) {
            return Err(invalid("tau_m must be positive"));
        }
        if !(self.tau_s_ms > 0.0 && self.tau_s_ms.is_finite()) {
            return Err(invalid("tau_s must be positive"));
        }
        if !(self.theta.is_finite() && self.v_rest.is_finite() && self.theta > self.v_rest) {
            return Err(invalid("threshold must exceed the resting potential"));
        }
        Ok(())
    }
}

/// Membrane state of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LifState {
    pub u: f64,
}

impl LifState {
    pub fn at_rest(params: &NeuronParams) -> Self {
        Self { u: params.v_rest }
    }

    pub fn step(&mut self, input_current: f64, params: &NeuronParams, dt_ms: f64) -> Result<bool> {
        let (u, spiked) = lif_step(self.u, input_current, params, dt_ms)?;
        self.u = u;
        Ok(spiked)
    }
}

/// One Euler step: integrate, test threshold, subtract `theta` on a spike.
///
/// At most one spike is emitted per step however far `u` overshoots.
#[inline]
pub fn lif_step(u: f64, input_current: f64, params: &NeuronParams, dt_ms: f64) -> Result<(f64, bool)> {
    if !(u.is_finite() && input_current.is_finite()) {
        return Err(Error::NonFinite(format!(
            "LIF step input (u={u}, I={input_current})"
        )));
    }
    if !(dt_ms > 0.0) {
        return Err(invalid("LIF step needs dt > 0"));
    }
    let mut next = u + dt_ms / params.tau_m_ms * (-(u - params.v_rest) + input_current);
    let spiked = next >= params.theta;
    if spiked {
        next -= params.theta;
    }
    Ok((next, spiked))
}

/// Drive a single resting cell with `input_current`; returns spikes and post-reset potentials.
pub fn run_neuron(input_current: &Signal, params: &NeuronParams) -> Result<(SpikeTrain, Signal)> {
    params.validate()?;
    let grid = input_current.grid();
    let mut state = LifState::at_rest(params);
    let mut spikes = SpikeTrain::silent(grid);
    let mut trace = Vec::with_capacity(grid.n_steps());
    for (n, &i) in input_current.values().iter().enumerate() {
        if state.step(i, params, grid.dt_ms())? {
            spikes.set(n, true);
        }
        trace.push(state.u);
    }
    Ok((spikes, Signal::from_values(grid, trace)?))
}
