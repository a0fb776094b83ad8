//! Sampled kernels and gate curves for plotting, plus the closed-form check
//! of the full reference kernel against its numeric convolution.

use serde::{Deserialize, Serialize};
use snn_core::bp_ref::{kappa_bp, kappa_bp_numeric, max_relative_error, BpKernelForm};
use snn_core::signal::{epsilon_kernel, stdp_kernel, zeta_kernel};
use snn_core::synapse::{gating_b, gating_b_mirrored, surrogate_sigma_prime};
use snn_core::{make_grid, GatingParams, StdpParams};

use crate::config::{CliError, ExperimentConfig};
use crate::output::{num, OutDir, RunReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsRun {
    /// Unused by the sampling itself; kept so every report carries a seed.
    pub seed: u64,
    pub duration_ms: f64,
    pub dt_ms: f64,
    pub tau_s_ms: f64,
    pub tau_m_ms: f64,
    pub stdp: StdpParams,
    pub gating: GatingParams,
    pub theta: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub u_points: usize,
    pub max_kappa_error: f64,
}

impl Default for KernelsRun {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_ms: 500.0,
            dt_ms: 0.1,
            tau_s_ms: 20.0,
            tau_m_ms: 50.0,
            stdp: StdpParams {
                a_plus: 1.0,
                a_minus: 0.0,
                tau_plus_ms: 20.0,
                tau_minus_ms: 20.0,
            },
            gating: GatingParams::default(),
            theta: 1.0,
            u_min: -2.0,
            u_max: 4.0,
            u_points: 601,
            max_kappa_error: 0.01,
        }
    }
}

impl ExperimentConfig for KernelsRun {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelsSummary {
    /// `max |numeric - closed| / max |closed|` for the full reference kernel.
    pub kappa_max_relative_error: f64,
    pub kappa_pass: bool,
    pub kappa_full_peak_ms: f64,
    pub kappa_main_peak_ms: f64,
    pub gate_peak_u: f64,
    pub mirrored_gate_peak_u: f64,
    pub sigma_prime_peak_u: f64,
}

#[derive(Debug, Clone)]
pub struct KernelsOutcome {
    pub summary: KernelsSummary,
    /// t, eps, zeta, stdp causal, stdp anticausal, kappa main, kappa full, kappa numeric
    pub kernels: Vec<[f64; 8]>,
    /// u, B, mirrored B, sigma'
    pub gates: Vec<[f64; 4]>,
}

fn argmax_at(rows: impl Iterator<Item = (f64, f64)>) -> f64 {
    rows.fold((f64::NAN, f64::NEG_INFINITY), |best, (x, y)| if y > best.1 { (x, y) } else { best })
        .0
}

pub fn run_kernels(cfg: &KernelsRun) -> Result<KernelsOutcome, CliError> {
    if !(cfg.u_points >= 2 && cfg.u_max > cfg.u_min) {
        return Err(CliError::Usage("need u_points >= 2 and u_max > u_min".into()));
    }
    cfg.gating.validate()?;
    let grid = make_grid(cfg.duration_ms, cfg.dt_ms)?;
    let eps = epsilon_kernel(cfg.tau_s_ms, grid)?;
    let zeta = zeta_kernel(cfg.tau_m_ms, grid)?;
    let (causal, anticausal) = stdp_kernel(&cfg.stdp, grid)?;
    let main = kappa_bp(BpKernelForm::MainText, cfg.tau_s_ms, cfg.tau_m_ms, grid)?.samples;
    let full = kappa_bp(BpKernelForm::AppendixFull, cfg.tau_s_ms, cfg.tau_m_ms, grid)?.samples;
    let numeric = kappa_bp_numeric(cfg.tau_s_ms, cfg.tau_m_ms, grid)?;
    let err = max_relative_error(&numeric, &full)?;

    let kernels: Vec<[f64; 8]> = (0..grid.n_steps())
        .map(|n| {
            [
                grid.time_ms(n),
                eps.get(n),
                zeta.get(n),
                causal.get(n),
                anticausal.get(n),
                main.get(n),
                full.get(n),
                numeric.get(n),
            ]
        })
        .collect();
    let step = (cfg.u_max - cfg.u_min) / (cfg.u_points - 1) as f64;
    let gates: Vec<[f64; 4]> = (0..cfg.u_points)
        .map(|i| {
            let u = cfg.u_min + i as f64 * step;
            [
                u,
                gating_b(u, &cfg.gating),
                gating_b_mirrored(u, &cfg.gating, cfg.theta),
                surrogate_sigma_prime(u),
            ]
        })
        .collect();
    let summary = KernelsSummary {
        kappa_max_relative_error: err,
        kappa_pass: err <= cfg.max_kappa_error,
        kappa_full_peak_ms: argmax_at(kernels.iter().map(|r| (r[0], r[6]))),
        kappa_main_peak_ms: argmax_at(kernels.iter().map(|r| (r[0], r[5]))),
        gate_peak_u: argmax_at(gates.iter().map(|r| (r[0], r[1]))),
        mirrored_gate_peak_u: argmax_at(gates.iter().map(|r| (r[0], r[2]))),
        sigma_prime_peak_u: argmax_at(gates.iter().map(|r| (r[0], r[3]))),
    };
    Ok(KernelsOutcome { summary, kernels, gates })
}

pub fn cmd_kernels(cfg: &KernelsRun, out: &OutDir) -> Result<KernelsOutcome, CliError> {
    let o = run_kernels(cfg)?;
    out.write_csv(
        "kernels.csv",
        &[
            "t_ms",
            "epsilon",
            "zeta",
            "stdp_causal",
            "stdp_anticausal",
            "kappa_main",
            "kappa_full",
            "kappa_full_numeric",
        ],
        o.kernels.iter().map(|r| r.iter().map(|v| num(*v)).collect()),
    )?;
    out.write_csv(
        "gates.csv",
        &["u", "gate", "gate_mirrored", "sigma_prime"],
        o.gates.iter().map(|r| r.iter().map(|v| num(*v)).collect()),
    )?;
    out.write_json("report.json", &RunReport::new("kernels", cfg.seed, cfg, &o.summary, ()))?;
    Ok(o)
}

pub fn check(o: &KernelsOutcome) -> Result<(), CliError> {
    if o.summary.kappa_pass {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "kernel relative error {:.3e}",
            o.summary.kappa_max_relative_error
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sampling() {
        let o = run_kernels(&KernelsRun::default()).unwrap();
        assert_eq!(o.kernels.len(), 5000);
        assert_eq!(o.kernels[0][5], 0.0);
        assert_eq!(o.kernels[0][6], 0.0);
        assert!(o.summary.kappa_pass, "{:?}", o.summary);
        assert!((o.summary.sigma_prime_peak_u - 1.0).abs() < 1e-9);
        assert!((o.summary.mirrored_gate_peak_u - 1.0).abs() < 0.02);
        // main-text kernel peaks at tau_s
        assert!((o.summary.kappa_main_peak_ms - 20.0).abs() < 0.1 + 1e-9);
    }

    #[test]
    fn rejects_degenerate_u_range() {
        let cfg = KernelsRun { u_points: 1, ..Default::default() };
        assert!(matches!(run_kernels(&cfg), Err(CliError::Usage(_))));
    }
}
