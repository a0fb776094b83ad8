//! Surrogate-gradient backpropagation through a recorded rollout.
//!
//! The reference reads the same forward rollout as the microcircuit (same
//! spikes, PSCs and potentials), so any difference against the local rules
//! comes from the learning rules alone.
//!
//! Loss is the van Rossum distance, so at the output `-dL/da = target - a`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::microcircuit::{run_network, Network, NetworkInput, NetworkState};
use crate::plasticity::{local_updates, LearnRates, LearningKernel, UpdateBatch};
use crate::signal::{convolve_causal, convolve_reversed, epsilon_kernel, zeta_kernel, Signal, TimeGrid};
use crate::synapse::Gate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpKernelForm {
    /// `eps * eps = t/tau_s^2 exp(-t/tau_s)`, membrane filtering ignored.
    MainText,
    /// `eps * eps * zeta` in closed form.
    AppendixFull,
    /// `k[0] = 1`, the coincidence kernel.
    Discrete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpKernel {
    pub form: BpKernelForm,
    pub samples: Signal,
}

impl BpKernel {
    pub fn learning_kernel(&self) -> LearningKernel {
        match self.form {
            BpKernelForm::Discrete => LearningKernel::delta(),
            _ => LearningKernel::causal(self.samples.values().to_vec()).expect("finite samples"),
        }
    }
}

/// Sample the reference kernel on `grid`.
pub fn kappa_bp(form: BpKernelForm, tau_s_ms: f64, tau_m_ms: f64, grid: TimeGrid) -> Result<BpKernel> {
    if !(tau_s_ms > 0.0 && tau_s_ms.is_finite() && tau_m_ms > 0.0 && tau_m_ms.is_finite()) {
        return Err(invalid("kernel time constants must be positive"));
    }
    let ts = tau_s_ms;
    let tm = tau_m_ms;
    let samples = match form {
        BpKernelForm::MainText => Signal::from_fn(grid, |t| t / (ts * ts) * (-t / ts).exp())?,
        BpKernelForm::AppendixFull => {
            if ts == tm {
                return Err(invalid("closed form of eps*eps*zeta is singular for tau_s == tau_m"));
            }
            let d = tm - ts;
            Signal::from_fn(grid, |t| {
                tm * ((-t / tm).exp() - (-t / ts).exp()) / (d * d) - t * (-t / ts).exp() / (ts * d)
            })?
        }
        BpKernelForm::Discrete => {
            let mut v = vec![0.0; grid.n_steps()];
            v[0] = 1.0;
            Signal::from_values(grid, v)?
        }
    };
    Ok(BpKernel { form, samples })
}

/// `eps * eps * zeta` by Riemann-sum convolution on the grid.
pub fn kappa_bp_numeric(tau_s_ms: f64, tau_m_ms: f64, grid: TimeGrid) -> Result<Signal> {
    let eps = epsilon_kernel(tau_s_ms, grid)?;
    let zeta = zeta_kernel(tau_m_ms, grid)?;
    convolve_causal(&convolve_causal(&eps, &eps)?, &zeta)
}

/// `max |a - b| / max |b|`.
pub fn max_relative_error(a: &Signal, b: &Signal) -> Result<f64> {
    let num = a.max_abs_diff(b)?;
    let den = b.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if den == 0.0 { num } else { num / den })
}

/// Per-layer error signals and loss gradients with respect to the forward weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BpGradState {
    /// `e = -dL/da * sigma'(u)` propagated per layer, time by neuron.
    pub errors: Vec<Array2<f64>>,
    /// `dL/dw_forward` per layer.
    pub grads: Vec<Array2<f64>>,
}

impl BpGradState {
    fn zeros(state: &NetworkState, net: &Network) -> Self {
        let t = state.grid.n_steps();
        Self {
            errors: net.layers.iter().map(|l| Array2::zeros((t, l.n_out()))).collect(),
            grads: net.layers.iter().map(|l| Array2::zeros(l.w_forward.dim())).collect(),
        }
    }

    /// Gradient-descent step `-eta * dL/dw` on the forward weights, as an update batch.
    pub fn descent_step(&self, net: &Network, eta: f64) -> UpdateBatch {
        let mut b = UpdateBatch::zeros_like(net);
        for (u, g) in b.layers.iter_mut().zip(&self.grads) {
            u.forward = g * -eta;
        }
        b
    }
}

fn check_state(state: &NetworkState, net: &Network) -> Result<()> {
    check_dim("rollout layers", net.layers.len(), state.layers.len())?;
    for (l, lt) in net.layers.iter().zip(&state.layers) {
        check_dim("rollout width", l.n_out(), lt.pyramidal.n_neurons())?;
    }
    Ok(())
}

/// `dL/dw = -dt sum_t e[t] (s_pre * k)[t]` for layer `k`.
fn layer_grad(state: &NetworkState, k: usize, error: &Array2<f64>, kernel: &LearningKernel) -> Array2<f64> {
    let trace = kernel.trace_matrix(&state.presynaptic(k).spikes);
    let mut g = error.t().dot(&trace);
    g *= -state.grid.dt_ms();
    g
}

/// Output layer only: `e = (target - a) sigma'(u)`.
pub fn bp_output_grads(state: &NetworkState, net: &Network, kernel: &LearningKernel, deriv: &Gate) -> Result<BpGradState> {
    check_state(state, net)?;
    let mut out = BpGradState::zeros(state, net);
    let last = net.layers.len() - 1;
    let o = state.output();
    check_dim("targets", o.n_neurons(), state.targets.ncols())?;
    let mut e = &state.targets - &o.psc;
    e.zip_mut_with(&o.u_gate, |v, u| *v *= deriv.eval(*u));
    out.grads[last] = layer_grad(state, last, &e, kernel);
    out.errors[last] = e;
    Ok(out)
}

/// Propagate `e_prev = sigma'(u_prev) (W^T e_next)` down from the output, instant by instant.
pub fn bp_hidden_grads(
    state: &NetworkState,
    net: &Network,
    kernel: &LearningKernel,
    deriv: &Gate,
    mut grads: BpGradState,
) -> Result<BpGradState> {
    check_state(state, net)?;
    check_dim("gradient layers", net.layers.len(), grads.errors.len())?;
    for k in (1..net.layers.len()).rev() {
        let w = &net.layers[k].w_forward;
        // e_next (T x n_out) . W (n_out x n_in) gives W^T e_next per row
        let mut e = grads.errors[k].dot(w);
        e.zip_mut_with(&state.layers[k - 1].pyramidal.u_gate, |v, u| *v *= deriv.eval(*u));
        grads.grads[k - 1] = layer_grad(state, k - 1, &e, kernel);
        grads.errors[k - 1] = e;
    }
    Ok(grads)
}

pub fn bp_grads(state: &NetworkState, net: &Network, kernel: &LearningKernel, deriv: &Gate) -> Result<BpGradState> {
    let out = bp_output_grads(state, net, kernel, deriv)?;
    bp_hidden_grads(state, net, kernel, deriv, out)
}

/// Gradients keeping the temporal filtering on the error side:
/// `d = ((g ~eps) sigma'(u)) ~zeta`, where `~` is convolution with the
/// time-reversed kernel, then `dL/dw = dt sum_t d[t] a_pre[t]` and
/// `g_prev = W^T d`. `errors` holds `-d`.
pub fn bp_full_dependency_grads(state: &NetworkState, net: &Network, deriv: &Gate) -> Result<BpGradState> {
    check_state(state, net)?;
    let grid = state.grid;
    let eps = epsilon_kernel(net.neuron.tau_s_ms, grid)?;
    let zeta = zeta_kernel(net.neuron.tau_m_ms, grid)?;
    let mut out = BpGradState::zeros(state, net);
    let last = net.layers.len() - 1;
    // dL/da per unit time at the output
    let mut g = &state.output().psc - &state.targets;
    for k in (0..=last).rev() {
        let u = &state.layers[k].pyramidal.u_gate;
        let mut d = Array2::zeros(g.dim());
        for i in 0..g.ncols() {
            let gi = Signal::from_values(grid, g.column(i).to_vec())?;
            let back = convolve_reversed(&gi, &eps)?;
            let gated: Vec<f64> = back
                .values()
                .iter()
                .zip(u.column(i))
                .map(|(b, ui)| b * deriv.eval(*ui))
                .collect();
            let di = convolve_reversed(&Signal::from_values(grid, gated)?, &zeta)?;
            d.column_mut(i).assign(&ArrayView1::from(di.values()));
        }
        let mut grad = d.t().dot(&state.presynaptic(k).psc);
        grad *= grid.dt_ms();
        out.grads[k] = grad;
        g = d.dot(&net.layers[k].w_forward);
        out.errors[k] = -d;
    }
    Ok(out)
}

/// Cosine of the angle between two gradient sets, flattened.
pub fn cosine_similarity(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y.iter()) {
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDeviation {
    pub layer: usize,
    /// Max `|local - bp| / |bp|` over entries with `|bp| >= floor`.
    pub max_relative: f64,
    pub max_abs: f64,
    /// `||local - bp||_F / ||bp||_F` (0 when both vanish).
    pub relative_frobenius: f64,
    pub compared: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub layers: Vec<LayerDeviation>,
    /// Preconditions that did not hold; deviations are then informational only.
    pub violations: Vec<String>,
}

impl EquivalenceReport {
    pub fn max_relative(&self) -> f64 {
        self.layers.iter().map(|l| l.max_relative).fold(0.0, f64::max)
    }

    pub fn max_relative_frobenius(&self) -> f64 {
        self.layers.iter().map(|l| l.relative_frobenius).fold(0.0, f64::max)
    }

    pub fn preconditions_hold(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn compare_updates(local: &Array2<f64>, bp: &Array2<f64>, floor: f64, layer: usize) -> LayerDeviation {
    let mut dev = LayerDeviation {
        layer,
        max_relative: 0.0,
        max_abs: 0.0,
        relative_frobenius: 0.0,
        compared: 0,
        excluded: 0,
    };
    let (mut diff2, mut ref2) = (0.0, 0.0);
    for (l, b) in local.iter().zip(bp.iter()) {
        let d = (l - b).abs();
        dev.max_abs = dev.max_abs.max(d);
        diff2 += d * d;
        ref2 += b * b;
        if b.abs() < floor {
            dev.excluded += 1;
        } else {
            dev.compared += 1;
            dev.max_relative = dev.max_relative.max(d / b.abs());
        }
    }
    dev.relative_frobenius = if ref2 > 0.0 { (diff2 / ref2).sqrt() } else { diff2.sqrt() };
    dev
}

/// Entries smaller than this are left out of elementwise relative deviations.
pub const EQUIVALENCE_FLOOR: f64 = 1e-12;

/// Compare one local forward-weight update against one reference gradient step
/// on the same rollout, using the coincidence kernel on both sides. The local
/// side gates errors with the network's own gate; the reference always uses
/// the surrogate derivative.
pub fn equivalence_check(net: &Network, input: &NetworkInput, targets: &[Signal], eta: f64) -> Result<EquivalenceReport> {
    let mut violations = Vec::new();
    if !net.is_self_predicting() {
        violations.push("network is not in the self-predicting state".to_string());
    }
    if net.gate != Gate::SigmaPrime {
        violations.push(format!("error gate {:?} is not the surrogate derivative", net.gate));
    }
    let state = run_network(net, input, targets)?;
    let kernel = LearningKernel::delta();
    let rates = LearnRates {
        eta_forward: eta,
        eta_predict: eta,
        eta_error: eta,
    };
    let local = local_updates(&state, net, &rates, &kernel)?;
    let bp = bp_grads(&state, net, &kernel, &Gate::SigmaPrime)?.descent_step(net, eta);
    let layers = local
        .layers
        .iter()
        .zip(&bp.layers)
        .enumerate()
        .map(|(k, (l, b))| compare_updates(&l.forward, &b.forward, EQUIVALENCE_FLOOR, k))
        .collect();
    Ok(EquivalenceReport { layers, violations })
}

/// Signal `x` scaled elementwise by `deriv(u)`, exposed for gate comparisons.
pub fn gated(x: ArrayView1<f64>, u: ArrayView1<f64>, deriv: &Gate) -> Array1<f64> {
    x.iter().zip(u.iter()).map(|(a, b)| a * deriv.eval(*b)).collect()
}
