//! Local-rule updates against reference gradient steps on random networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use snn_core::bp_ref::{equivalence_check, EquivalenceReport};
use snn_core::microcircuit::{Network, NetworkInput, PredictInit, WeightInit, WeightMode};
use snn_core::{Gate, NeuronParams, Signal, SpikeTrain, TimeGrid};

use crate::config::{CliError, ExperimentConfig};
use crate::output::{num, OutDir, RunReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivRun {
    pub seed: u64,
    pub networks: usize,
    /// Layer sizes, input first. With `random_sizes` each is an upper bound.
    pub sizes: Vec<usize>,
    pub random_sizes: bool,
    pub steps: usize,
    pub dt_ms: f64,
    pub neuron: NeuronParams,
    pub init: WeightInit,
    pub gate: Gate,
    pub weight_mode: WeightMode,
    pub predict_init: PredictInit,
    /// Per-step firing probability of each input channel.
    pub input_rate: f64,
    /// Targets are constant PSCs drawn from `[0, target_max)`.
    pub target_max: f64,
    pub eta: f64,
    pub tolerance: f64,
}

impl Default for EquivRun {
    fn default() -> Self {
        Self {
            seed: 0,
            networks: 20,
            sizes: vec![10, 8, 4],
            random_sizes: true,
            steps: 20,
            dt_ms: 1.0,
            neuron: NeuronParams {
                tau_m_ms: 5.0,
                tau_s_ms: 5.0,
                theta: 1.0,
                v_rest: 0.0,
            },
            init: WeightInit {
                scale: 3.0,
                bias: 2.0,
                fan_in_scaled: false,
            },
            gate: Gate::SigmaPrime,
            weight_mode: WeightMode::SelfPredicting,
            predict_init: PredictInit::Copy,
            input_rate: 0.4,
            target_max: 0.3,
            eta: 0.5,
            tolerance: 1e-6,
        }
    }
}

impl ExperimentConfig for EquivRun {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetResult {
    pub index: usize,
    pub sizes: Vec<usize>,
    pub report: EquivalenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivSummary {
    pub networks: usize,
    pub max_relative: f64,
    pub max_relative_frobenius: f64,
    pub compared_entries: usize,
    pub excluded_entries: usize,
    /// False when some network breaks the preconditions; deviations are then informational.
    pub preconditions_hold: bool,
    /// `None` in informational mode.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct EquivOutcome {
    pub summary: EquivSummary,
    pub nets: Vec<NetResult>,
}

pub fn run_equiv(cfg: &EquivRun) -> Result<EquivOutcome, CliError> {
    if cfg.networks == 0 {
        return Err(CliError::Usage("networks must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.input_rate) || !(cfg.target_max >= 0.0) {
        return Err(CliError::Usage("input_rate must be in [0, 1] and target_max >= 0".into()));
    }
    let grid = TimeGrid::with_steps(cfg.steps, cfg.dt_ms)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = Vec::with_capacity(cfg.networks);
    for index in 0..cfg.networks {
        let sizes: Vec<usize> = if cfg.random_sizes {
            cfg.sizes.iter().map(|&m| rng.gen_range(1..=m.max(1))).collect()
        } else {
            cfg.sizes.clone()
        };
        let net_seed: u64 = rng.gen();
        let net = Network::random(&sizes, cfg.init, cfg.predict_init, cfg.neuron, cfg.gate, cfg.weight_mode, net_seed)?;
        let trains = (0..sizes[0])
            .map(|_| {
                let fired = (0..grid.n_steps()).map(|_| rng.gen_bool(cfg.input_rate)).collect();
                SpikeTrain::from_fired(grid, fired)
            })
            .collect::<snn_core::Result<Vec<_>>>()?;
        let targets = (0..sizes[sizes.len() - 1])
            .map(|_| Signal::constant(grid, rng.gen::<f64>() * cfg.target_max))
            .collect::<snn_core::Result<Vec<_>>>()?;
        let report = equivalence_check(&net, &NetworkInput::Spikes(trains), &targets, cfg.eta)?;
        nets.push(NetResult { index, sizes, report });
    }
    let preconditions_hold = nets.iter().all(|n| n.report.preconditions_hold());
    let max_relative = nets.iter().map(|n| n.report.max_relative()).fold(0.0, f64::max);
    let layers = || nets.iter().flat_map(|n| &n.report.layers);
    let summary = EquivSummary {
        networks: nets.len(),
        max_relative,
        max_relative_frobenius: nets.iter().map(|n| n.report.max_relative_frobenius()).fold(0.0, f64::max),
        compared_entries: layers().map(|l| l.compared).sum(),
        excluded_entries: layers().map(|l| l.excluded).sum(),
        preconditions_hold,
        pass: preconditions_hold.then_some(max_relative <= cfg.tolerance),
    };
    Ok(EquivOutcome { summary, nets })
}

pub fn cmd_equiv(cfg: &EquivRun, out: &OutDir) -> Result<EquivOutcome, CliError> {
    let o = run_equiv(cfg)?;
    let rows = o.nets.iter().flat_map(|n| {
        n.report.layers.iter().map(move |l| {
            vec![
                n.index.to_string(),
                n.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-"),
                l.layer.to_string(),
                num(l.max_relative),
                num(l.max_abs),
                num(l.relative_frobenius),
                l.compared.to_string(),
                l.excluded.to_string(),
            ]
        })
    });
    out.write_csv(
        "equiv.csv",
        &["net", "sizes", "layer", "max_relative", "max_abs", "relative_frobenius", "compared", "excluded"],
        rows,
    )?;
    out.write_json("report.json", &RunReport::new("equiv", cfg.seed, cfg, &o.summary, &o.nets))?;
    Ok(o)
}

pub fn check(o: &EquivOutcome) -> Result<(), CliError> {
    match o.summary.pass {
        Some(false) => Err(CliError::Threshold(format!(
            "max relative deviation {:.3e}",
            o.summary.max_relative
        ))),
        _ => Ok(()),
    }
}
