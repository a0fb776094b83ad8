//! Fully connected MNIST classification with current-encoded pixels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snn_core::data_io::{image_sample, load_mnist_idx, LabeledImage};
use snn_core::microcircuit::{Network, PredictInit, WeightInit, WeightMode};
use snn_core::plasticity::{evaluate, train, KernelSpec, LearnRates, Rule, Sample, TrainConfig, UpdateSchedule};
use snn_core::{Gate, GatingParams, NeuronParams, TimeGrid};

use crate::config::{CliError, ExperimentConfig};
use crate::output::{num, OutDir, RunReport};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistRun {
    pub seed: u64,
    /// Directory holding the four uncompressed IDX files.
    pub data_dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub epochs: usize,
    pub steps: usize,
    pub dt_ms: f64,
    pub hidden: Vec<usize>,
    pub neuron: NeuronParams,
    /// Input current per unit pixel intensity.
    pub gain: f64,
    pub target_hi: f64,
    pub target_lo: f64,
    pub init: WeightInit,
    pub gate: Gate,
    pub weight_mode: WeightMode,
    pub kernel: KernelSpec,
    pub rates: LearnRates,
    /// All rates are multiplied by this after each epoch.
    pub eta_decay: f64,
    pub batch_size: usize,
    pub rule: Rule,
    /// Also train an identical network with the other rule and report both.
    pub compare_rules: bool,
    pub min_accuracy: f64,
    /// Largest allowed accuracy difference between the two rules.
    pub max_rule_gap: f64,
}

impl Default for MnistRun {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: 10_000,
            test_limit: 1_000,
            epochs: 3,
            steps: 5,
            dt_ms: 1.0,
            hidden: vec![300],
            neuron: NeuronParams {
                tau_m_ms: 2.0,
                tau_s_ms: 2.0,
                theta: 1.0,
                v_rest: 0.0,
            },
            gain: 4.0,
            target_hi: 1.0,
            target_lo: 0.0,
            init: WeightInit {
                scale: 4.0,
                bias: 0.0,
                fan_in_scaled: true,
            },
            gate: Gate::Mirrored {
                params: GatingParams::default(),
                theta: 1.0,
            },
            weight_mode: WeightMode::SelfPredicting,
            kernel: KernelSpec::Delta,
            rates: LearnRates::with_forward(0.01),
            eta_decay: 0.3,
            batch_size: 1,
            rule: Rule::Local,
            compare_rules: true,
            min_accuracy: 0.9,
            max_rule_gap: 0.02,
        }
    }
}

impl ExperimentConfig for MnistRun {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub rule: Rule,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleResult {
    pub rule: Rule,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MnistSummary {
    pub train_samples: usize,
    pub test_samples: usize,
    pub results: Vec<RuleResult>,
    /// Absolute accuracy difference between the rules, when both ran.
    pub rule_gap: Option<f64>,
    pub accuracy_pass: bool,
    pub rule_gap_pass: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct MnistOutcome {
    pub summary: MnistSummary,
    pub epochs: Vec<EpochRow>,
}

fn load(dir: &Path, images: &str, labels: &str, limit: usize) -> Result<Vec<LabeledImage>, CliError> {
    let (ip, lp) = (dir.join(images), dir.join(labels));
    for p in [&ip, &lp] {
        if !p.is_file() {
            return Err(CliError::Usage(format!("MNIST file {} not found", p.display())));
        }
    }
    load_mnist_idx(&ip, &lp, limit).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn samples(cfg: &MnistRun, images: &[LabeledImage], grid: TimeGrid) -> Result<Vec<Sample>, CliError> {
    images
        .iter()
        .map(|img| image_sample(img, grid, cfg.gain, cfg.target_hi, cfg.target_lo).map_err(CliError::from))
        .collect()
}

pub fn build_network(cfg: &MnistRun) -> Result<Network, CliError> {
    let mut sizes = vec![784];
    sizes.extend(&cfg.hidden);
    sizes.push(10);
    let predict_init = match cfg.weight_mode {
        WeightMode::SelfPredicting => PredictInit::Copy,
        _ => PredictInit::Random,
    };
    Ok(Network::random(&sizes, cfg.init, predict_init, cfg.neuron, cfg.gate, cfg.weight_mode, cfg.seed)?)
}

fn train_rule(cfg: &MnistRun, rule: Rule, train_set: &[Sample], test_set: &[Sample]) -> Result<(f64, Vec<EpochRow>), CliError> {
    let mut net = build_network(cfg)?;
    let mut tc = TrainConfig {
        epochs: 1,
        batch_size: cfg.batch_size,
        rates: cfg.rates,
        kernel: cfg.kernel,
        rule,
        schedule: UpdateSchedule::PerSample,
        shuffle: true,
        reference_derivative: Gate::SigmaPrime,
    };
    let mut rows = Vec::new();
    let mut acc = evaluate(&net, test_set)?;
    for epoch in 0..cfg.epochs {
        // distinct shuffle per epoch, identical across rules
        let log = train(&mut net, train_set, &tc, cfg.seed.wrapping_add(epoch as u64))?;
        acc = evaluate(&net, test_set)?;
        let e = &log.epochs[0];
        eprintln!("{rule:?} epoch {epoch}: train acc {:.4}, test acc {acc:.4}", e.train_accuracy.unwrap_or(0.0));
        rows.push(EpochRow {
            rule,
            epoch,
            train_loss: e.mean_loss,
            train_accuracy: e.train_accuracy.unwrap_or(0.0),
            test_accuracy: acc,
        });
        let r = &mut tc.rates;
        r.eta_forward *= cfg.eta_decay;
        r.eta_predict *= cfg.eta_decay;
        r.eta_error *= cfg.eta_decay;
    }
    Ok((acc, rows))
}

pub fn run_mnist(cfg: &MnistRun) -> Result<MnistOutcome, CliError> {
    if cfg.train_limit == 0 {
        return Err(CliError::Usage("train_limit is 0: the training set would be empty".into()));
    }
    if cfg.test_limit == 0 {
        return Err(CliError::Usage("test_limit is 0: nothing to evaluate".into()));
    }
    if !(cfg.eta_decay > 0.0 && cfg.eta_decay.is_finite()) {
        return Err(CliError::Usage(format!("eta_decay must be positive, got {}", cfg.eta_decay)));
    }
    let grid = TimeGrid::with_steps(cfg.steps, cfg.dt_ms)?;
    let train_imgs = load(&cfg.data_dir, TRAIN_IMAGES, TRAIN_LABELS, cfg.train_limit)?;
    let test_imgs = load(&cfg.data_dir, TEST_IMAGES, TEST_LABELS, cfg.test_limit)?;
    let train_set = samples(cfg, &train_imgs, grid)?;
    let test_set = samples(cfg, &test_imgs, grid)?;

    let mut rules = vec![cfg.rule];
    if cfg.compare_rules {
        rules.push(match cfg.rule {
            Rule::Local => Rule::BpReference,
            Rule::BpReference => Rule::Local,
        });
    }
    let mut results = Vec::new();
    let mut epochs = Vec::new();
    for rule in rules {
        let (acc, rows) = train_rule(cfg, rule, &train_set, &test_set)?;
        results.push(RuleResult { rule, test_accuracy: acc });
        epochs.extend(rows);
    }
    let rule_gap = (results.len() == 2).then(|| (results[0].test_accuracy - results[1].test_accuracy).abs());
    Ok(MnistOutcome {
        summary: MnistSummary {
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            accuracy_pass: results[0].test_accuracy >= cfg.min_accuracy,
            rule_gap_pass: rule_gap.map(|g| g <= cfg.max_rule_gap),
            rule_gap,
            results,
        },
        epochs,
    })
}

pub fn cmd_mnist(cfg: &MnistRun, out: &OutDir) -> Result<MnistOutcome, CliError> {
    let o = run_mnist(cfg)?;
    let rule_name = |r: Rule| match r {
        Rule::Local => "local",
        Rule::BpReference => "bp_reference",
    };
    out.write_csv(
        "epochs.csv",
        &["rule", "epoch", "train_loss", "train_accuracy", "test_accuracy"],
        o.epochs.iter().map(|e| {
            vec![
                rule_name(e.rule).to_string(),
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.train_accuracy),
                num(e.test_accuracy),
            ]
        }),
    )?;
    out.write_json("report.json", &RunReport::new("mnist", cfg.seed, cfg, &o.summary, &o.epochs))?;
    Ok(o)
}

pub fn check(o: &MnistOutcome) -> Result<(), CliError> {
    let s = &o.summary;
    if s.accuracy_pass && s.rule_gap_pass.unwrap_or(true) {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "accuracy {:.4} (pass {}), rule gap {:?} (pass {:?})",
            s.results[0].test_accuracy, s.accuracy_pass, s.rule_gap, s.rule_gap_pass
        )))
    }
}
