//! Time grids, sampled signals, spike trains and the kernels that connect them.
//!
//! Two convolution conventions coexist here. Sampled functions convolve as a
//! Riemann sum and carry a `dt` factor; spike trains are sums of unit
//! impulses, so filtering a spike train by a kernel adds one kernel copy per
//! spike with no `dt` factor. The latter keeps a PSC peak at `1/tau_s`
//! regardless of the step size.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform sampling of `[0, duration)` with step `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    duration_ms: f64,
    dt_ms: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(duration_ms: f64, dt_ms: f64) -> Result<Self> {
        if !(duration_ms.is_finite() && dt_ms.is_finite()) {
            return Err(invalid("grid duration and step must be finite"));
        }
        if duration_ms <= 0.0 || dt_ms <= 0.0 {
            return Err(invalid(format!(
                "grid needs positive duration and step, got duration={duration_ms}, dt={dt_ms}"
            )));
        }
        if duration_ms < dt_ms {
            return Err(invalid(format!(
                "grid duration {duration_ms} is shorter than one step {dt_ms}"
            )));
        }
        let n_steps = (duration_ms / dt_ms).round() as usize;
        Ok(Self {
            duration_ms,
            dt_ms,
            n_steps: n_steps.max(1),
        })
    }

    /// A grid of `n_steps` samples at spacing `dt_ms`.
    pub fn with_steps(n_steps: usize, dt_ms: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        Self::new(n_steps as f64 * dt_ms, dt_ms)
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_ms
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt_ms
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Time of sample `n` in milliseconds.
    pub fn time_ms(&self, n: usize) -> f64 {
        n as f64 * self.dt_ms
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid, context: &str) -> Result<()> {
        if self.n_steps == other.n_steps && self.dt_ms == other.dt_ms {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{context}: {} steps @ {} ms vs {} steps @ {} ms",
                self.n_steps, self.dt_ms, other.n_steps, other.dt_ms
            )))
        }
    }
}

/// Make a grid covering `duration_ms` at step `dt_ms`.
pub fn make_grid(duration_ms: f64, dt_ms: f64) -> Result<TimeGrid> {
    TimeGrid::new(duration_ms, dt_ms)
}

/// A real-valued series sampled on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Signal {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_steps()],
        }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant signal".into()));
        }
        Ok(Self {
            grid,
            values: vec![value; grid.n_steps()],
        })
    }

    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        crate::error::check_dim("signal samples", grid.n_steps(), values.len())?;
        if let Some(n) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("signal sample {n}")));
        }
        Ok(Self { grid, values })
    }

    /// Build from a closure of the sample time in ms.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.n_steps()).map(|n| f(grid.time_ms(n))).collect();
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }

    /// Riemann integral `sum(values) * dt`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dt_ms()
    }

    pub fn scaled(&self, c: f64) -> Result<Signal> {
        Signal::from_values(self.grid, self.values.iter().map(|v| v * c).collect())
    }

    pub fn max_abs_diff(&self, other: &Signal) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "signal difference")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Binary firing record on a grid; at most one spike per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    grid: TimeGrid,
    fired: Vec<bool>,
}

impl SpikeTrain {
    pub fn silent(grid: TimeGrid) -> Self {
        Self {
            grid,
            fired: vec![false; grid.n_steps()],
        }
    }

    pub fn from_fired(grid: TimeGrid, fired: Vec<bool>) -> Result<Self> {
        crate::error::check_dim("spike train samples", grid.n_steps(), fired.len())?;
        Ok(Self { grid, fired })
    }

    /// Spike train firing at the given step indices. Duplicates collapse to one spike.
    pub fn from_steps(grid: TimeGrid, steps: &[usize]) -> Result<Self> {
        let mut train = Self::silent(grid);
        for &n in steps {
            if n >= grid.n_steps() {
                return Err(invalid(format!(
                    "spike at step {n} outside grid of {} steps",
                    grid.n_steps()
                )));
            }
            train.fired[n] = true;
        }
        Ok(train)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn fired(&self) -> &[bool] {
        &self.fired
    }

    pub fn is_fired(&self, n: usize) -> bool {
        self.fired[n]
    }

    pub fn set(&mut self, n: usize, fired: bool) {
        self.fired[n] = fired;
    }

    pub fn spike_steps(&self) -> Vec<usize> {
        self.fired
            .iter()
            .enumerate()
            .filter_map(|(n, &f)| f.then_some(n))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.fired.iter().filter(|&&f| f).count()
    }

    /// Sampled impulse train: `1/dt` at every spike so each spike integrates to one.
    pub fn to_impulse_signal(&self) -> Signal {
        let h = 1.0 / self.grid.dt_ms();
        Signal {
            grid: self.grid,
            values: self.fired.iter().map(|&f| if f { h } else { 0.0 }).collect(),
        }
    }
}

/// Amplitudes and time constants of the two-sided exponential STDP window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdpParams {
    pub a_plus: f64,
    pub a_minus: f64,
    pub tau_plus_ms: f64,
    pub tau_minus_ms: f64,
}

impl Default for StdpParams {
    /// Potentiation-only window used by the spike-train approximator.
    fn default() -> Self {
        Self {
            a_plus: 4e-5,
            a_minus: 0.0,
            tau_plus_ms: 30.0,
            tau_minus_ms: 30.0,
        }
    }
}

impl StdpParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a_plus, self.a_minus, self.tau_plus_ms, self.tau_minus_ms]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("STDP parameters must be finite"));
        }
        if self.tau_plus_ms <= 0.0 || self.tau_minus_ms <= 0.0 {
            return Err(invalid("STDP time constants must be positive"));
        }
        if self.a_plus < 0.0 || self.a_minus < 0.0 {
            return Err(invalid("STDP amplitudes are magnitudes and must be >= 0"));
        }
        Ok(())
    }

    /// Signed window value at lag `t_post - t_pre` (ms). Zero lag counts as causal.
    pub fn window(&self, lag_ms: f64) -> f64 {
        if lag_ms >= 0.0 {
            self.a_plus * (-lag_ms / self.tau_plus_ms).exp()
        } else {
            -self.a_minus * (lag_ms / self.tau_minus_ms).exp()
        }
    }
}

fn exp_kernel(tau_ms: f64, grid: TimeGrid, what: &str) -> Result<Signal> {
    if !(tau_ms.is_finite() && tau_ms > 0.0) {
        return Err(invalid(format!("{what} time constant must be positive, got {tau_ms}")));
    }
    Signal::from_fn(grid, |t| (-t / tau_ms).exp() / tau_ms)
}

/// Synaptic impulse response `(1/tau_s) exp(-t/tau_s)`, unit area.
pub fn epsilon_kernel(tau_s_ms: f64, grid: TimeGrid) -> Result<Signal> {
    exp_kernel(tau_s_ms, grid, "synaptic")
}

/// Membrane impulse response `(1/tau_m) exp(-t/tau_m)`, unit area.
pub fn zeta_kernel(tau_m_ms: f64, grid: TimeGrid) -> Result<Signal> {
    exp_kernel(tau_m_ms, grid, "membrane")
}

/// Magnitudes of both STDP window sides sampled at lags `n * dt`, `n >= 0`.
///
/// The sign of the depression side is applied where the window is used.
pub fn stdp_kernel(params: &StdpParams, grid: TimeGrid) -> Result<(Signal, Signal)> {
    params.validate()?;
    let pos = Signal::from_fn(grid, |t| params.a_plus * (-t / params.tau_plus_ms).exp())?;
    let neg = Signal::from_fn(grid, |t| params.a_minus * (-t / params.tau_minus_ms).exp())?;
    Ok((pos, neg))
}

/// Riemann-sum causal convolution `out[n] = sum_{m<=n} x[m] k[n-m] dt`.
pub fn convolve_causal(x: &Signal, k: &Signal) -> Result<Signal> {
    x.grid.ensure_same(&k.grid, "convolution")?;
    let dt = x.grid.dt_ms();
    let n_steps = x.len();
    let mut out = vec![0.0; n_steps];
    for (m, &xm) in x.values.iter().enumerate() {
        if xm == 0.0 {
            continue;
        }
        for (o, &kv) in out[m..].iter_mut().zip(&k.values) {
            *o += xm * kv;
        }
    }
    for o in &mut out {
        *o *= dt;
    }
    Signal::from_values(x.grid, out)
}

/// Anti-causal counterpart: `out[n] = sum_{m>=n} x[m] k[m-n] dt`, i.e. convolution
/// with the time-reversed kernel, truncated at the end of the window.
pub fn convolve_reversed(x: &Signal, k: &Signal) -> Result<Signal> {
    x.grid.ensure_same(&k.grid, "reversed convolution")?;
    let dt = x.grid.dt_ms();
    let n_steps = x.len();
    let mut out = vec![0.0; n_steps];
    for (m, &xm) in x.values.iter().enumerate() {
        if xm == 0.0 {
            continue;
        }
        // contributes to out[n] for n <= m with lag m - n
        for (lag, &kv) in k.values.iter().take(m + 1).enumerate() {
            out[m - lag] += xm * kv;
        }
    }
    for o in &mut out {
        *o *= dt;
    }
    Signal::from_values(x.grid, out)
}

/// Postsynaptic current of a spike train: one kernel copy per spike, no `dt` factor.
pub fn psc_from_spikes(s: &SpikeTrain, k: &Signal) -> Result<Signal> {
    s.grid.ensure_same(&k.grid, "PSC filtering")?;
    let mut out = vec![0.0; s.fired.len()];
    for tf in s.spike_steps() {
        for (o, &kv) in out[tf..].iter_mut().zip(&k.values) {
            *o += kv;
        }
    }
    Signal::from_values(s.grid, out)
}

/// `0.5 * sum_n (target[n] - out[n])^2 * dt`, the L2 distance of filtered spike trains.
pub fn van_rossum_loss(a_out: &Signal, a_target: &Signal) -> Result<f64> {
    a_out.grid.ensure_same(&a_target.grid, "van Rossum loss")?;
    let sq: f64 = a_out
        .values
        .iter()
        .zip(&a_target.values)
        .map(|(o, t)| (t - o) * (t - o))
        .sum();
    Ok(0.5 * sq * a_out.grid.dt_ms())
}
