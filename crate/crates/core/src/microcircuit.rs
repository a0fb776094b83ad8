//! Layers of paired pyramidal/SOM cells and the error signals they compute.
//!
//! Each weight layer `l` owns four matrices:
//!
//! * `w_forward`  (n_out x n_in): basal input to pyramidal cells,
//! * `w_predict`  (n_out x n_in): the same input onto the paired SOM cells,
//! * `w_topdown`  (n_in x n_out): pyramidal output (PSC + error) back onto the
//!   apical dendrites of layer `l-1`,
//! * `w_topdown_predict` (n_in x n_out): SOM output onto those same dendrites,
//!   entering with a minus sign.
//!
//! Errors are learning signals only. They never enter membrane integration,
//! so the pyramidal forward pass is the same whether or not errors are computed.
//!
//! Per step, all layers are advanced input to output, the output error is
//! formed from the targets, and errors are then propagated output to input,
//! all from that step's PSCs and pre-integration potentials.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::neuron::{lif_step, NeuronParams};
use crate::signal::{psc_from_spikes, epsilon_kernel, Signal, SpikeTrain, TimeGrid};
use crate::synapse::Gate;

/// How the top-down weights relate to the forward weights during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_topdown` is re-synced to the transpose of `w_forward` after every update.
    Tied,
    /// `w_topdown` stays at its random initial value.
    FeedbackAlignment,
    /// All four weight classes are held equal (predict = forward, both top-down = forward^T).
    SelfPredicting,
}

/// How predict and top-down-predict weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictInit {
    Random,
    /// Copy the forward / top-down weights.
    Copy,
}

/// `w = scale * N(0, 1) + bias`, optionally with `scale / sqrt(n_in)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightInit {
    pub scale: f64,
    pub bias: f64,
    #[serde(default)]
    pub fan_in_scaled: bool,
}

impl Default for WeightInit {
    fn default() -> Self {
        Self {
            scale: 0.3,
            bias: 0.01,
            fan_in_scaled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrocircuitLayer {
    pub w_forward: Array2<f64>,
    pub w_predict: Array2<f64>,
    pub w_topdown: Array2<f64>,
    pub w_topdown_predict: Array2<f64>,
}

impl MicrocircuitLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w_forward: Array2::zeros((n_out, n_in)),
            w_predict: Array2::zeros((n_out, n_in)),
            w_topdown: Array2::zeros((n_in, n_out)),
            w_topdown_predict: Array2::zeros((n_in, n_out)),
        }
    }

    /// Layer in the self-predicting state built around `w_forward`.
    pub fn self_predicting(w_forward: Array2<f64>) -> Self {
        let t = w_forward.t().to_owned();
        Self {
            w_predict: w_forward.clone(),
            w_topdown: t.clone(),
            w_topdown_predict: t,
            w_forward,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w_forward.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w_forward.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_out, n_in) = self.w_forward.dim();
        if self.w_predict.dim() != (n_out, n_in) {
            return Err(invalid("w_predict must have the shape of w_forward"));
        }
        if self.w_topdown.dim() != (n_in, n_out) || self.w_topdown_predict.dim() != (n_in, n_out) {
            return Err(invalid("top-down matrices must have the transposed forward shape"));
        }
        let all = [&self.w_forward, &self.w_predict, &self.w_topdown, &self.w_topdown_predict];
        if all.iter().any(|m| m.iter().any(|w| !w.is_finite())) {
            return Err(Error::NonFinite("layer weights".into()));
        }
        Ok(())
    }

    /// Exact (bitwise) check that predict = forward and both top-down = forward^T.
    pub fn is_self_predicting(&self) -> bool {
        let t = self.w_forward.t();
        self.w_predict == self.w_forward && self.w_topdown == t && self.w_topdown_predict == t
    }

    pub fn is_tied(&self) -> bool {
        self.w_topdown == self.w_forward.t()
    }

    pub(crate) fn enforce(&mut self, mode: WeightMode) {
        match mode {
            WeightMode::Tied => self.w_topdown.assign(&self.w_forward.t()),
            WeightMode::FeedbackAlignment => {}
            WeightMode::SelfPredicting => {
                self.w_predict.assign(&self.w_forward);
                self.w_topdown.assign(&self.w_forward.t());
                self.w_topdown_predict.assign(&self.w_forward.t());
            }
        }
    }

    /// Mean `|w_topdown_predict - w_topdown|`.
    pub fn topdown_gap(&self) -> f64 {
        mean_abs_diff(&self.w_topdown_predict, &self.w_topdown)
    }

    /// Mean `|w_predict - w_forward|`.
    pub fn predict_gap(&self) -> f64 {
        mean_abs_diff(&self.w_predict, &self.w_forward)
    }
}

fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// A feed-forward stack of microcircuit layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<MicrocircuitLayer>,
    pub neuron: NeuronParams,
    pub gate: Gate,
    pub mode: WeightMode,
}

impl Network {
    pub fn new(layers: Vec<MicrocircuitLayer>, neuron: NeuronParams, gate: Gate, mode: WeightMode) -> Result<Self> {
        neuron.validate()?;
        if layers.is_empty() {
            return Err(invalid("network needs at least one weight layer"));
        }
        for l in &layers {
            l.validate()?;
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].n_out(), pair[1].n_in())?;
        }
        let mut net = Self {
            layers,
            neuron,
            gate,
            mode,
        };
        net.enforce_mode();
        Ok(net)
    }

    /// Random network with layer sizes `sizes = [n_inputs, h1, ..., n_outputs]`.
    pub fn random(
        sizes: &[usize],
        init: WeightInit,
        predict_init: PredictInit,
        neuron: NeuronParams,
        gate: Gate,
        mode: WeightMode,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid("layer sizes need an input and an output size, all >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Array2<f64> {
            let scale = if init.fan_in_scaled {
                init.scale / (fan_in as f64).sqrt()
            } else {
                init.scale
            };
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z + init.bias
            })
        };
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let w_forward = draw(n_out, n_in, n_in);
            let w_predict = match predict_init {
                PredictInit::Random => draw(n_out, n_in, n_in),
                PredictInit::Copy => w_forward.clone(),
            };
            let w_topdown = match mode {
                WeightMode::FeedbackAlignment => draw(n_in, n_out, n_in),
                _ => w_forward.t().to_owned(),
            };
            let w_topdown_predict = match predict_init {
                PredictInit::Random => draw(n_in, n_out, n_in),
                PredictInit::Copy => w_topdown.clone(),
            };
            layers.push(MicrocircuitLayer {
                w_forward,
                w_predict,
                w_topdown,
                w_topdown_predict,
            });
        }
        Self::new(layers, neuron, gate, mode)
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn enforce_mode(&mut self) {
        for l in &mut self.layers {
            l.enforce(self.mode);
        }
    }

    pub fn is_self_predicting(&self) -> bool {
        self.layers.iter().all(MicrocircuitLayer::is_self_predicting)
    }
}

/// What drives the input layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkInput {
    /// Presynaptic spike trains used as-is; their PSCs are `s * eps`.
    Spikes(Vec<SpikeTrain>),
    /// Currents injected into a layer of encoding LIF cells (no SOM partners, no error).
    Currents(Vec<Signal>),
}

impl NetworkInput {
    pub fn len(&self) -> usize {
        match self {
            NetworkInput::Spikes(s) => s.len(),
            NetworkInput::Currents(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn grid(&self) -> Option<TimeGrid> {
        match self {
            NetworkInput::Spikes(s) => s.first().map(SpikeTrain::grid),
            NetworkInput::Currents(c) => c.first().map(Signal::grid),
        }
    }
}

/// Time-by-neuron traces of one population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTrace {
    pub spikes: Array2<bool>,
    pub psc: Array2<f64>,
    /// Potential after integration and reset.
    pub u: Array2<f64>,
    /// Potential at the start of the step, where gates are evaluated.
    pub u_gate: Array2<f64>,
}

impl PopulationTrace {
    fn zeros(n_steps: usize, n: usize) -> Self {
        Self {
            spikes: Array2::from_elem((n_steps, n), false),
            psc: Array2::zeros((n_steps, n)),
            u: Array2::zeros((n_steps, n)),
            u_gate: Array2::zeros((n_steps, n)),
        }
    }

    pub fn n_neurons(&self) -> usize {
        self.psc.ncols()
    }

    pub fn spike_train(&self, grid: TimeGrid, i: usize) -> SpikeTrain {
        SpikeTrain::from_fired(grid, self.spikes.column(i).to_vec()).expect("trace matches grid")
    }

    pub fn psc_signal(&self, grid: TimeGrid, i: usize) -> Signal {
        Signal::from_values(grid, self.psc.column(i).to_vec()).expect("finite trace")
    }

    /// Spikes as a 0/1 matrix.
    pub fn spike_matrix(&self) -> Array2<f64> {
        self.spikes.mapv(|f| if f { 1.0 } else { 0.0 })
    }

    fn record(&mut self, t: usize, pop: &Population) {
        self.spikes.row_mut(t).assign(&pop.spiked);
        self.psc.row_mut(t).assign(&pop.psc);
        self.u.row_mut(t).assign(&pop.u);
        self.u_gate.row_mut(t).assign(&pop.u_gate);
    }
}

/// Everything recorded for one weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pyramidal: PopulationTrace,
    pub som: PopulationTrace,
    /// Apical error `e` of the pyramidal cells.
    pub error: Array2<f64>,
    /// Error `e_p` of the SOM cells.
    pub som_error: Array2<f64>,
}

/// Complete record of a rollout over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub grid: TimeGrid,
    pub input: PopulationTrace,
    pub layers: Vec<LayerTrace>,
    /// Target PSCs, time by output neuron.
    pub targets: Array2<f64>,
    /// False for inference-only rollouts, where SOM traces and errors stay zero.
    pub learning_signals: bool,
}

impl NetworkState {
    pub fn output(&self) -> &PopulationTrace {
        &self.layers[self.layers.len() - 1].pyramidal
    }

    /// Presynaptic population of weight layer `k`.
    pub fn presynaptic(&self, k: usize) -> &PopulationTrace {
        if k == 0 {
            &self.input
        } else {
            &self.layers[k - 1].pyramidal
        }
    }

    /// Summed van Rossum loss over output cells.
    pub fn loss(&self) -> f64 {
        let out = &self.output().psc;
        let sq: f64 = out.iter().zip(self.targets.iter()).map(|(o, t)| (t - o) * (t - o)).sum();
        0.5 * sq * self.grid.dt_ms()
    }

    /// Time-integrated output PSC per output cell.
    pub fn output_integral(&self) -> Vec<f64> {
        let dt = self.grid.dt_ms();
        self.output().psc.sum_axis(Axis(0)).iter().map(|v| v * dt).collect()
    }
}

/// Dynamic state of a population of LIF cells with exponential PSCs.
#[derive(Debug, Clone)]
struct Population {
    u: Array1<f64>,
    u_gate: Array1<f64>,
    psc: Array1<f64>,
    spiked: Array1<bool>,
}

impl Population {
    fn at_rest(n: usize, params: &NeuronParams) -> Self {
        Self {
            u: Array1::from_elem(n, params.v_rest),
            u_gate: Array1::from_elem(n, params.v_rest),
            psc: Array1::zeros(n),
            spiked: Array1::from_elem(n, false),
        }
    }

    /// Integrate `currents`, fire, and update PSCs by the recursion equivalent to `s * eps`.
    fn step(&mut self, currents: ArrayView1<f64>, params: &NeuronParams, dt: f64, decay: f64) -> Result<()> {
        let jump = 1.0 / params.tau_s_ms;
        for i in 0..self.u.len() {
            self.u_gate[i] = self.u[i];
            let (u, s) = lif_step(self.u[i], currents[i], params, dt)?;
            self.u[i] = u;
            self.spiked[i] = s;
            self.psc[i] = self.psc[i] * decay + if s { jump } else { 0.0 };
        }
        Ok(())
    }
}

/// Per-layer dynamic state used by [`forward_step`].
#[derive(Debug, Clone)]
pub struct LayerDynamics {
    pyramidal: Population,
    som: Population,
}

impl LayerDynamics {
    pub fn at_rest(layer: &MicrocircuitLayer, params: &NeuronParams) -> Self {
        Self {
            pyramidal: Population::at_rest(layer.n_out(), params),
            som: Population::at_rest(layer.n_out(), params),
        }
    }

    pub fn pyramidal_psc(&self) -> &Array1<f64> {
        &self.pyramidal.psc
    }

    pub fn som_psc(&self) -> &Array1<f64> {
        &self.som.psc
    }

    pub fn pyramidal_spikes(&self) -> &Array1<bool> {
        &self.pyramidal.spiked
    }

    pub fn som_spikes(&self) -> &Array1<bool> {
        &self.som.spiked
    }

    pub fn pyramidal_u(&self) -> &Array1<f64> {
        &self.pyramidal.u
    }

    pub fn som_u(&self) -> &Array1<f64> {
        &self.som.u
    }
}

/// Advance both populations of a layer by one step given the presynaptic PSCs.
///
/// With `with_som = false` only the pyramidal cells move (inference).
pub fn forward_step(
    layer: &MicrocircuitLayer,
    dynamics: &mut LayerDynamics,
    presyn_psc: ArrayView1<f64>,
    params: &NeuronParams,
    dt_ms: f64,
    with_som: bool,
) -> Result<()> {
    check_dim("forward step input", layer.n_in(), presyn_psc.len())?;
    let decay = (-dt_ms / params.tau_s_ms).exp();
    let drive = layer.w_forward.dot(&presyn_psc);
    dynamics.pyramidal.step(drive.view(), params, dt_ms, decay)?;
    if with_som {
        let drive = layer.w_predict.dot(&presyn_psc);
        dynamics.som.step(drive.view(), params, dt_ms, decay)?;
    }
    Ok(())
}

/// `e_i = B(u_i) (target_i - a_i)` at the output layer.
pub fn output_error(a_out: &[f64], a_target: &[f64], u_out: &[f64], gate: &Gate) -> Result<Vec<f64>> {
    check_dim("output error targets", a_out.len(), a_target.len())?;
    check_dim("output error potentials", a_out.len(), u_out.len())?;
    Ok(a_out
        .iter()
        .zip(a_target)
        .zip(u_out)
        .map(|((a, t), u)| gate.eval(*u) * (t - a))
        .collect())
}

/// `e_p,i = B(u_p,i) (a_i - a_p,i)`: teaching current minus the SOM cell's own output.
pub fn som_error(a_pyr: &[f64], a_som: &[f64], u_som: &[f64], gate: &Gate) -> Result<Vec<f64>> {
    check_dim("SOM error", a_pyr.len(), a_som.len())?;
    check_dim("SOM error potentials", a_pyr.len(), u_som.len())?;
    Ok(a_pyr
        .iter()
        .zip(a_som)
        .zip(u_som)
        .map(|((a, p), u)| gate.eval(*u) * (a - p))
        .collect())
}

/// Apical error of layer `l-1` from layer `l`'s pyramidal and SOM outputs:
/// `e_j = B(u_j) sum_i [w_td[j,i] (a_i + e_i) - w_tdp[j,i] a_p,i]`.
pub fn hidden_error(
    layer: &MicrocircuitLayer,
    a_next: &[f64],
    e_next: &[f64],
    a_som_next: &[f64],
    u_prev: &[f64],
    gate: &Gate,
) -> Result<Vec<f64>> {
    check_dim("hidden error PSCs", layer.n_out(), a_next.len())?;
    check_dim("hidden error errors", layer.n_out(), e_next.len())?;
    check_dim("hidden error SOM PSCs", layer.n_out(), a_som_next.len())?;
    check_dim("hidden error potentials", layer.n_in(), u_prev.len())?;
    // Grouped as w_td e + (w_td a - w_tdp a_p) so the cancelling part is exactly
    // zero once the SOM cells reproduce their partners.
    let err = layer.w_topdown.dot(&ArrayView1::from(e_next));
    let pyr = layer.w_topdown.dot(&ArrayView1::from(a_next));
    let som = layer.w_topdown_predict.dot(&ArrayView1::from(a_som_next));
    Ok(u_prev
        .iter()
        .enumerate()
        .map(|(j, u)| gate.eval(*u) * (err[j] + (pyr[j] - som[j])))
        .collect())
}

fn target_matrix(targets: &[Signal], grid: TimeGrid, n_out: usize) -> Result<Array2<f64>> {
    check_dim("target channels", n_out, targets.len())?;
    let mut m = Array2::zeros((grid.n_steps(), n_out));
    for (i, s) in targets.iter().enumerate() {
        s.grid().ensure_same(&grid, "target signal")?;
        m.column_mut(i).assign(&ArrayView1::from(s.values()));
    }
    Ok(m)
}

enum InputDrive {
    Fixed,
    Encoded { currents: Array2<f64>, cells: Population },
}

/// A rollout that can be advanced one step at a time, so weights may change between steps.
pub struct Rollout {
    drive: InputDrive,
    dynamics: Vec<LayerDynamics>,
    state: NetworkState,
    t: usize,
}

impl Rollout {
    /// Full rollout with SOM cells and error signals.
    pub fn new(net: &Network, input: &NetworkInput, targets: &[Signal]) -> Result<Self> {
        let grid = input
            .grid()
            .ok_or_else(|| invalid("network input has no channels"))?;
        let t = target_matrix(targets, grid, net.n_outputs())?;
        Self::build(net, input, grid, t, true)
    }

    /// Pyramidal-only rollout using just the forward weights.
    pub fn inference(net: &Network, input: &NetworkInput) -> Result<Self> {
        let grid = input
            .grid()
            .ok_or_else(|| invalid("network input has no channels"))?;
        let t = Array2::zeros((grid.n_steps(), net.n_outputs()));
        Self::build(net, input, grid, t, false)
    }

    fn build(net: &Network, input: &NetworkInput, grid: TimeGrid, targets: Array2<f64>, learning: bool) -> Result<Self> {
        check_dim("network inputs", net.n_inputs(), input.len())?;
        let n_steps = grid.n_steps();
        let mut input_trace = PopulationTrace::zeros(n_steps, net.n_inputs());
        let drive = match input {
            NetworkInput::Spikes(trains) => {
                let eps = epsilon_kernel(net.neuron.tau_s_ms, grid)?;
                for (j, s) in trains.iter().enumerate() {
                    s.grid().ensure_same(&grid, "input spike train")?;
                    let a = psc_from_spikes(s, &eps)?;
                    input_trace.psc.column_mut(j).assign(&ArrayView1::from(a.values()));
                    input_trace.spikes.column_mut(j).assign(&ArrayView1::from(s.fired()));
                }
                InputDrive::Fixed
            }
            NetworkInput::Currents(currents) => {
                let mut m = Array2::zeros((n_steps, currents.len()));
                for (j, c) in currents.iter().enumerate() {
                    c.grid().ensure_same(&grid, "input current")?;
                    m.column_mut(j).assign(&ArrayView1::from(c.values()));
                }
                InputDrive::Encoded {
                    currents: m,
                    cells: Population::at_rest(currents.len(), &net.neuron),
                }
            }
        };
        let layers = net
            .layers
            .iter()
            .map(|l| LayerTrace {
                pyramidal: PopulationTrace::zeros(n_steps, l.n_out()),
                som: PopulationTrace::zeros(n_steps, l.n_out()),
                error: Array2::zeros((n_steps, l.n_out())),
                som_error: Array2::zeros((n_steps, l.n_out())),
            })
            .collect();
        Ok(Self {
            drive,
            dynamics: net.layers.iter().map(|l| LayerDynamics::at_rest(l, &net.neuron)).collect(),
            state: NetworkState {
                grid,
                input: input_trace,
                layers,
                targets,
                learning_signals: learning,
            },
            t: 0,
        })
    }

    pub fn current_step(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.state.grid.n_steps()
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    /// Advance one step under the current weights of `net`.
    pub fn step(&mut self, net: &Network) -> Result<()> {
        if self.is_done() {
            return Err(invalid("rollout already covers the whole grid"));
        }
        check_dim("rollout layers", self.dynamics.len(), net.layers.len())?;
        let t = self.t;
        let dt = self.state.grid.dt_ms();
        let params = &net.neuron;
        let learning = self.state.learning_signals;

        if let InputDrive::Encoded { currents, cells } = &mut self.drive {
            let decay = (-dt / params.tau_s_ms).exp();
            cells.step(currents.row(t), params, dt, decay)?;
            self.state.input.record(t, cells);
        }

        // (1) forward, input to output
        for k in 0..net.layers.len() {
            let (before, rest) = self.dynamics.split_at_mut(k);
            let presyn = if k == 0 {
                self.state.input.psc.row(t).to_owned()
            } else {
                before[k - 1].pyramidal.psc.clone()
            };
            forward_step(&net.layers[k], &mut rest[0], presyn.view(), params, dt, learning)?;
            let lt = &mut self.state.layers[k];
            lt.pyramidal.record(t, &rest[0].pyramidal);
            if learning {
                lt.som.record(t, &rest[0].som);
            }
        }

        if learning {
            let gate = &net.gate;
            // (2) output error from targets
            let last = net.layers.len() - 1;
            {
                let d = &self.dynamics[last];
                let target = self.state.targets.row(t).to_vec();
                let e = output_error(
                    d.pyramidal.psc.as_slice().expect("contiguous"),
                    &target,
                    d.pyramidal.u_gate.as_slice().expect("contiguous"),
                    gate,
                )?;
                self.state.layers[last].error.row_mut(t).assign(&Array1::from(e));
            }
            // (3) hidden errors, output to input; the input layer receives none
            for k in (1..net.layers.len()).rev() {
                let upper = &self.dynamics[k];
                let e_next = self.state.layers[k].error.row(t).to_vec();
                let e = hidden_error(
                    &net.layers[k],
                    upper.pyramidal.psc.as_slice().expect("contiguous"),
                    &e_next,
                    upper.som.psc.as_slice().expect("contiguous"),
                    self.dynamics[k - 1].pyramidal.u_gate.as_slice().expect("contiguous"),
                    gate,
                )?;
                self.state.layers[k - 1].error.row_mut(t).assign(&Array1::from(e));
            }
            for (k, d) in self.dynamics.iter().enumerate() {
                let e = som_error(
                    d.pyramidal.psc.as_slice().expect("contiguous"),
                    d.som.psc.as_slice().expect("contiguous"),
                    d.som.u_gate.as_slice().expect("contiguous"),
                    gate,
                )?;
                self.state.layers[k].som_error.row_mut(t).assign(&Array1::from(e));
            }
        }
        self.t += 1;
        Ok(())
    }

    pub fn finish(self) -> NetworkState {
        self.state
    }
}

/// Roll the network over the whole grid, recording every trace and error.
pub fn run_network(net: &Network, input: &NetworkInput, targets: &[Signal]) -> Result<NetworkState> {
    let mut r = Rollout::new(net, input, targets)?;
    while !r.is_done() {
        r.step(net)?;
    }
    Ok(r.finish())
}

/// Forward-only pass through pyramidal cells.
pub fn infer(net: &Network, input: &NetworkInput) -> Result<NetworkState> {
    let mut r = Rollout::inference(net, input)?;
    while !r.is_done() {
        r.step(net)?;
    }
    Ok(r.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::make_grid;
    use crate::synapse::{gating_b, GatingParams};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn params() -> NeuronParams {
        NeuronParams::default()
    }

    fn random_input(grid: TimeGrid, n: usize, p: f64, seed: u64) -> NetworkInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkInput::Spikes(
            (0..n)
                .map(|_| SpikeTrain::from_fired(grid, (0..grid.n_steps()).map(|_| rng.gen_bool(p)).collect()).unwrap())
                .collect(),
        )
    }

    #[test]
    fn zero_input_zero_state() {
        let layer = MicrocircuitLayer::zeros(3, 2);
        let mut d = LayerDynamics::at_rest(&layer, &params());
        forward_step(&layer, &mut d, Array1::zeros(3).view(), &params(), 1.0, true).unwrap();
        assert!(d.pyramidal_psc().iter().all(|&v| v == 0.0));
        assert!(d.som_psc().iter().all(|&v| v == 0.0));
        assert!(!d.pyramidal_spikes().iter().any(|&s| s));
    }

    #[test]
    fn forward_step_checks_dimensions() {
        let layer = MicrocircuitLayer::zeros(3, 2);
        let mut d = LayerDynamics::at_rest(&layer, &params());
        assert!(forward_step(&layer, &mut d, Array1::zeros(4).view(), &params(), 1.0, true).is_err());
    }

    #[test]
    fn single_neuron_two_steps_by_hand() {
        // w = 60, presynaptic PSC 0.05 -> I = 3.0; tau_m = 50, dt = 1
        // step 0: u = 0 + (1/50)(0 + 3) = 0.06
        // step 1: u = 0.06 + (1/50)(-0.06 + 3) = 0.1188
        let layer = MicrocircuitLayer::self_predicting(array![[60.0]]);
        let mut d = LayerDynamics::at_rest(&layer, &params());
        forward_step(&layer, &mut d, array![0.05].view(), &params(), 1.0, true).unwrap();
        assert_relative_eq!(d.pyramidal_u()[0], 0.06, epsilon = 1e-15);
        forward_step(&layer, &mut d, array![0.05].view(), &params(), 1.0, true).unwrap();
        assert_relative_eq!(d.pyramidal_u()[0], 0.1188, epsilon = 1e-15);
        assert_eq!(d.pyramidal_psc()[0], 0.0);

        // a large drive fires at once: PSC jumps to 1/tau_s
        forward_step(&layer, &mut d, array![2.0].view(), &params(), 1.0, true).unwrap();
        assert!(d.pyramidal_spikes()[0]);
        assert_relative_eq!(d.pyramidal_psc()[0], 0.05, epsilon = 1e-15);
        assert_eq!(d.som_psc(), d.pyramidal_psc());
    }

    #[test]
    fn som_tracks_pyramidal_when_predict_equals_forward() {
        let grid = make_grid(200.0, 1.0).unwrap();
        let net = Network::random(
            &[6, 5, 3],
            WeightInit { scale: 2.0, bias: 3.0, fan_in_scaled: false },
            PredictInit::Copy,
            params(),
            Gate::Unity,
            WeightMode::Tied,
            4,
        )
        .unwrap();
        let input = random_input(grid, 6, 0.2, 9);
        let targets = vec![Signal::zeros(grid); 3];
        let st = run_network(&net, &input, &targets).unwrap();
        for l in &st.layers {
            assert_eq!(l.som.psc, l.pyramidal.psc);
            assert_eq!(l.som.spikes, l.pyramidal.spikes);
            assert!(l.som_error.iter().all(|&e| e == 0.0));
        }
        assert!(st.output().spikes.iter().any(|&s| s), "test network should fire");
    }

    #[test]
    fn error_signals() {
        let fig = GatingParams::default();
        assert_eq!(output_error(&[0.4], &[0.4], &[0.3], &Gate::Sigmoid(fig)).unwrap(), vec![0.0]);
        assert_relative_eq!(output_error(&[0.5], &[0.6], &[0.0], &Gate::Unity).unwrap()[0], 0.1, epsilon = 1e-15);
        let e = output_error(&[0.5], &[0.6], &[1.0], &Gate::Sigmoid(fig)).unwrap()[0];
        assert_relative_eq!(e, gating_b(1.0, &fig) * (0.6 - 0.5), epsilon = 1e-15);
        assert!((e - 0.08733).abs() < 1e-5);
        assert!(output_error(&[0.5, 0.1], &[0.6], &[1.0, 1.0], &Gate::Unity).is_err());

        assert_eq!(som_error(&[0.3, 0.2], &[0.3, 0.2], &[0.0, 2.0], &Gate::Sigmoid(fig)).unwrap(), vec![0.0, 0.0]);
        assert_eq!(som_error(&[1.0], &[0.0], &[0.5], &Gate::Unity).unwrap(), vec![1.0]);
        assert!(som_error(&[1.0], &[0.0, 1.0], &[0.5], &Gate::Unity).is_err());
    }

    #[test]
    fn som_error_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gate = Gate::Mirrored { params: GatingParams::default(), theta: 1.0 };
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let v = som_error(&a, &p, &u, &gate).unwrap();
        for i in 0..9 {
            assert_eq!(v[i], gate.eval(u[i]) * (a[i] - p[i]));
        }
    }

    #[test]
    fn hidden_error_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = MicrocircuitLayer::zeros(4, 3);
        for m in [&mut layer.w_forward, &mut layer.w_predict] {
            m.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        for m in [&mut layer.w_topdown, &mut layer.w_topdown_predict] {
            m.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        let gate = Gate::Sigmoid(GatingParams::default());
        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let ap: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let got = hidden_error(&layer, &a, &e, &ap, &u, &gate).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..3 {
                s += layer.w_topdown[[j, i]] * (a[i] + e[i]) - layer.w_topdown_predict[[j, i]] * ap[i];
            }
            assert!((got[j] - gate.eval(u[j]) * s).abs() < 1e-12);
        }
        assert!(hidden_error(&layer, &a, &e, &ap, &u[..3], &gate).is_err());
    }

    #[test]
    fn cancellation_in_self_predicting_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let layer = MicrocircuitLayer::self_predicting(w.clone());
        assert!(layer.is_self_predicting());
        let gate = Gate::SigmaPrime;
        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let got = hidden_error(&layer, &a, &e, &a, &u, &gate).unwrap();
        for j in 0..4 {
            let direct: f64 = (0..3).map(|i| w[[i, j]] * e[i]).sum();
            assert!((got[j] - gate.eval(u[j]) * direct).abs() < 1e-12);
        }
        let zero = hidden_error(&layer, &a, &[0.0; 3], &a, &u, &gate).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_everything_stays_zero() {
        let grid = make_grid(50.0, 1.0).unwrap();
        let net = Network::new(
            vec![MicrocircuitLayer::zeros(2, 3), MicrocircuitLayer::zeros(3, 1)],
            params(),
            Gate::Sigmoid(GatingParams::default()),
            WeightMode::Tied,
        )
        .unwrap();
        let input = NetworkInput::Spikes(vec![SpikeTrain::silent(grid); 2]);
        let st = run_network(&net, &input, &[Signal::zeros(grid)]).unwrap();
        for l in &st.layers {
            for m in [&l.pyramidal.psc, &l.pyramidal.u, &l.som.psc, &l.error, &l.som_error] {
                assert!(m.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn chain_rollout_by_hand() {
        // 1-1-1 chain with w1 = 100, w2 = 40, one input spike at step 0, tau_m = 50, tau_s = 20, dt = 1.
        // input PSC: 0.05, 0.05 e^-0.05, 0.05 e^-0.1
        // hidden: I0 = 5 -> u = 0.1; I1 = 5 e^-0.05 -> u = 0.1 + (1/50)(-0.1 + 5e^-0.05); ...
        let grid = make_grid(3.0, 1.0).unwrap();
        let net = Network::new(
            vec![
                MicrocircuitLayer::self_predicting(array![[100.0]]),
                MicrocircuitLayer::self_predicting(array![[40.0]]),
            ],
            params(),
            Gate::Unity,
            WeightMode::SelfPredicting,
        )
        .unwrap();
        let input = NetworkInput::Spikes(vec![SpikeTrain::from_steps(grid, &[0]).unwrap()]);
        let target = Signal::constant(grid, 0.2).unwrap();
        let st = run_network(&net, &input, &[target]).unwrap();

        let a_in = [0.05, 0.05 * (-0.05f64).exp(), 0.05 * (-0.1f64).exp()];
        let mut u = 0.0;
        let mut hidden_u = vec![];
        for a in a_in {
            u += (-u + 100.0 * a) / 50.0;
            hidden_u.push(u);
        }
        for t in 0..3 {
            assert_relative_eq!(st.layers[0].pyramidal.u[[t, 0]], hidden_u[t], epsilon = 1e-14);
            assert_relative_eq!(st.input.psc[[t, 0]], a_in[t], epsilon = 1e-15);
        }
        // hidden never fires -> output silent, output error = target, hidden error = w2 * e_out
        assert!(st.layers[0].pyramidal.spikes.iter().all(|&s| !s));
        for t in 0..3 {
            assert_eq!(st.layers[1].error[[t, 0]], 0.2);
            assert_relative_eq!(st.layers[0].error[[t, 0]], 40.0 * 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn tied_construction_is_tied() {
        let net = Network::random(
            &[4, 3, 2],
            WeightInit::default(),
            PredictInit::Random,
            params(),
            Gate::Unity,
            WeightMode::Tied,
            11,
        )
        .unwrap();
        assert!(net.layers.iter().all(MicrocircuitLayer::is_tied));
        assert!(!net.is_self_predicting());

        let sp = Network::random(
            &[4, 3, 2],
            WeightInit::default(),
            PredictInit::Copy,
            params(),
            Gate::Unity,
            WeightMode::SelfPredicting,
            11,
        )
        .unwrap();
        assert!(sp.is_self_predicting());
    }

    #[test]
    fn inference_matches_full_pass() {
        let grid = make_grid(150.0, 1.0).unwrap();
        let net = Network::random(
            &[8, 6, 2],
            WeightInit { scale: 2.0, bias: 3.0, fan_in_scaled: false },
            PredictInit::Random,
            params(),
            Gate::Sigmoid(GatingParams::default()),
            WeightMode::FeedbackAlignment,
            21,
        )
        .unwrap();
        let input = random_input(grid, 8, 0.15, 3);
        let full = run_network(&net, &input, &vec![Signal::constant(grid, 0.3).unwrap(); 2]).unwrap();
        let inf = infer(&net, &input).unwrap();
        for (a, b) in full.layers.iter().zip(&inf.layers) {
            assert_eq!(a.pyramidal, b.pyramidal);
        }
        assert!(full.output().spikes.iter().any(|&s| s));
    }

    #[test]
    fn current_input_drives_encoder_cells() {
        let grid = make_grid(20.0, 1.0).unwrap();
        let net = Network::new(vec![MicrocircuitLayer::self_predicting(array![[1.0], [0.5]])], params(), Gate::Unity, WeightMode::SelfPredicting).unwrap();
        let input = NetworkInput::Currents(vec![Signal::constant(grid, 60.0).unwrap()]);
        let st = infer(&net, &input).unwrap();
        // I = 60: u = 1.2 at step 0 -> spike, remainder 0.2
        assert!(st.input.spikes[[0, 0]]);
        assert_relative_eq!(st.input.u[[0, 0]], 0.2, epsilon = 1e-12);
        assert_relative_eq!(st.input.psc[[0, 0]], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn rollout_rejects_mismatches() {
        let grid = make_grid(10.0, 1.0).unwrap();
        let other = make_grid(20.0, 1.0).unwrap();
        let net = Network::new(vec![MicrocircuitLayer::zeros(2, 1)], params(), Gate::Unity, WeightMode::Tied).unwrap();
        let ok_in = NetworkInput::Spikes(vec![SpikeTrain::silent(grid); 2]);
        assert!(run_network(&net, &NetworkInput::Spikes(vec![SpikeTrain::silent(grid); 3]), &[Signal::zeros(grid)]).is_err());
        assert!(run_network(&net, &ok_in, &[Signal::zeros(other)]).is_err());
        assert!(run_network(&net, &ok_in, &[]).is_err());
        assert!(Network::new(vec![MicrocircuitLayer::zeros(2, 3), MicrocircuitLayer::zeros(2, 1)], params(), Gate::Unity, WeightMode::Tied).is_err());
    }
}
