//! Fit one output cell to a random target spike train through a hidden layer.

use serde::{Deserialize, Serialize};
use snn_core::data_io::{toy_sample, ToyConfig};
use snn_core::microcircuit::{run_network, Network, PredictInit, WeightInit, WeightMode};
use snn_core::plasticity::{train, KernelSpec, LearnRates, Rule, TrainConfig, UpdateSchedule};
use snn_core::{make_grid, Gate, GatingParams, NeuronParams, StdpParams};

use crate::config::{CliError, ExperimentConfig};
use crate::output::{num, OutDir, RunReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRun {
    pub duration_ms: f64,
    pub dt_ms: f64,
    pub iterations: usize,
    pub task: ToyConfig,
    pub neuron: NeuronParams,
    pub stdp: StdpParams,
    pub rates: LearnRates,
    pub gate: Gate,
    pub weight_mode: WeightMode,
    pub predict_init: PredictInit,
    pub schedule: UpdateSchedule,
    /// Pass if final loss <= this fraction of the first iteration's loss.
    pub max_loss_ratio: f64,
    /// Pass if the final top-down weight gap <= this fraction of the initial gap.
    pub max_gap_ratio: f64,
}

impl Default for ToyRun {
    fn default() -> Self {
        Self {
            duration_ms: 500.0,
            dt_ms: 1.0,
            iterations: 5000,
            task: ToyConfig::default(),
            neuron: NeuronParams::default(),
            stdp: StdpParams::default(),
            rates: LearnRates::with_forward(20.0),
            gate: Gate::Mirrored {
                params: GatingParams::default(),
                theta: 1.0,
            },
            weight_mode: WeightMode::Tied,
            predict_init: PredictInit::Random,
            schedule: UpdateSchedule::PerSample,
            max_loss_ratio: 0.1,
            max_gap_ratio: 0.5,
        }
    }
}

impl ExperimentConfig for ToyRun {
    const SEED_PATH: &'static str = "task.seed";
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyIteration {
    pub iteration: usize,
    pub loss: f64,
    /// Mean |w_topdown_predict - w_topdown| of the output layer.
    pub topdown_gap: f64,
    /// Mean |w_predict - w_forward| per layer.
    pub predict_gap_hidden: f64,
    pub predict_gap_output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySummary {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub initial_topdown_gap: f64,
    pub final_topdown_gap: f64,
    pub gap_ratio: f64,
    pub loss_pass: bool,
    pub gap_pass: bool,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub summary: ToySummary,
    pub history: Vec<ToyIteration>,
    /// Final rollout: (t_ms, target, output, output SOM) per step.
    pub signals: Vec<[f64; 4]>,
}

fn gaps(net: &Network) -> (f64, f64, f64) {
    let last = net.layers.len() - 1;
    (
        net.layers[last].topdown_gap(),
        net.layers[0].predict_gap(),
        net.layers[last].predict_gap(),
    )
}

pub fn run_toy(cfg: &ToyRun) -> Result<ToyOutcome, CliError> {
    let grid = make_grid(cfg.duration_ms, cfg.dt_ms)?;
    let sample = toy_sample(&cfg.task, grid, cfg.neuron.tau_s_ms)?;
    let mut net = Network::random(
        &[cfg.task.n_inputs, cfg.task.n_hidden, 1],
        WeightInit {
            scale: cfg.task.init_scale,
            bias: cfg.task.init_bias,
            fan_in_scaled: false,
        },
        cfg.predict_init,
        cfg.neuron,
        cfg.gate,
        cfg.weight_mode,
        cfg.task.seed,
    )?;
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        rates: cfg.rates,
        kernel: KernelSpec::Stdp(cfg.stdp),
        rule: Rule::Local,
        schedule: cfg.schedule,
        shuffle: false,
        reference_derivative: Gate::SigmaPrime,
    };
    let samples = std::slice::from_ref(&sample);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let (topdown_gap, predict_gap_hidden, predict_gap_output) = gaps(&net);
        let log = train(&mut net, samples, &train_cfg, cfg.task.seed)?;
        history.push(ToyIteration {
            iteration,
            loss: log.iterations[0].loss,
            topdown_gap,
            predict_gap_hidden,
            predict_gap_output,
        });
    }
    let fin = run_network(&net, &sample.input, &sample.targets)?;
    let (final_gap, _, _) = gaps(&net);
    let initial_loss = history.first().map_or(fin.loss(), |h| h.loss);
    let initial_gap = history.first().map_or(final_gap, |h| h.topdown_gap);
    let final_loss = fin.loss();
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a == 0.0 { 0.0 } else { f64::INFINITY };
    let loss_ratio = ratio(final_loss, initial_loss);
    let gap_ratio = ratio(final_gap, initial_gap);
    let out = fin.output();
    let signals = (0..grid.n_steps())
        .map(|n| [grid.time_ms(n), fin.targets[[n, 0]], out.psc[[n, 0]], fin.layers[1].som.psc[[n, 0]]])
        .collect();
    Ok(ToyOutcome {
        summary: ToySummary {
            iterations: cfg.iterations,
            initial_loss,
            final_loss,
            loss_ratio,
            initial_topdown_gap: initial_gap,
            final_topdown_gap: final_gap,
            gap_ratio,
            loss_pass: loss_ratio <= cfg.max_loss_ratio,
            gap_pass: gap_ratio < cfg.max_gap_ratio,
        },
        history,
        signals,
    })
}

pub fn cmd_toy(cfg: &ToyRun, out: &OutDir) -> Result<ToyOutcome, CliError> {
    let o = run_toy(cfg)?;
    out.write_csv(
        "loss.csv",
        &["iteration", "loss", "topdown_gap", "predict_gap_hidden", "predict_gap_output"],
        o.history.iter().map(|h| {
            vec![
                h.iteration.to_string(),
                num(h.loss),
                num(h.topdown_gap),
                num(h.predict_gap_hidden),
                num(h.predict_gap_output),
            ]
        }),
    )?;
    out.write_csv(
        "signals.csv",
        &["t_ms", "a_target", "a_out", "a_predict"],
        o.signals.iter().map(|r| r.iter().map(|v| num(*v)).collect()),
    )?;
    out.write_json("report.json", &RunReport::new("toy", cfg.task.seed, cfg, &o.summary, &o.history))?;
    Ok(o)
}

pub fn check(o: &ToyOutcome) -> Result<(), CliError> {
    let s = &o.summary;
    if s.loss_pass && s.gap_pass {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "loss ratio {:.4} (pass {}), top-down gap ratio {:.4} (pass {})",
            s.loss_ratio, s.loss_pass, s.gap_ratio, s.gap_pass
        )))
    }
}
