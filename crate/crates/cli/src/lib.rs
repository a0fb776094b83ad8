//! Experiment runners behind the `snn` command.

pub mod config;
pub mod equiv;
pub mod kernels;
pub mod mnist;
pub mod output;
pub mod toy;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{load_config, CliError};
use output::OutDir;

#[derive(Debug, Parser)]
#[command(name = "snn", version, about = "Spiking microcircuit experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a random target spike train with a two-layer network.
    Toy(Common),
    /// Sample kernels and gates; check the closed-form reference kernel.
    Kernels(Common),
    /// Compare local updates with reference gradient steps on random networks.
    Equiv(Common),
    /// Train a fully connected classifier on MNIST.
    Mnist(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; fields not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 gives the single-threaded baseline.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Override a config field, e.g. `--set rates.eta_forward=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

fn init_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    // A pool may already exist when called twice in one process; the first one wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn prepare<T: config::ExperimentConfig>(c: &Common) -> Result<Option<(T, OutDir)>, CliError> {
    let cfg: T = load_config(c.config.as_deref(), c.seed, &c.overrides)?;
    if c.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Run(e.to_string()))?);
        return Ok(None);
    }
    init_threads(c.threads)?;
    let out = OutDir::create(&c.out)?;
    Ok(Some((cfg, out)))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Toy(c) => {
            let Some((cfg, out)) = prepare::<toy::ToyRun>(&c)? else { return Ok(()) };
            let o = toy::cmd_toy(&cfg, &out)?;
            let s = &o.summary;
            println!(
                "toy: loss {:.4} -> {:.4} (ratio {:.4}), top-down gap {:.4} -> {:.4} (ratio {:.4})",
                s.initial_loss, s.final_loss, s.loss_ratio, s.initial_topdown_gap, s.final_topdown_gap, s.gap_ratio
            );
            toy::check(&o)
        }
        Command::Kernels(c) => {
            let Some((cfg, out)) = prepare::<kernels::KernelsRun>(&c)? else { return Ok(()) };
            let o = kernels::cmd_kernels(&cfg, &out)?;
            println!("kernels: full kernel relative error {:.3e}", o.summary.kappa_max_relative_error);
            kernels::check(&o)
        }
        Command::Equiv(c) => {
            let Some((cfg, out)) = prepare::<equiv::EquivRun>(&c)? else { return Ok(()) };
            let o = equiv::cmd_equiv(&cfg, &out)?;
            let s = &o.summary;
            match s.pass {
                Some(_) => println!("equiv: {} networks, max relative deviation {:.3e}", s.networks, s.max_relative),
                None => println!(
                    "equiv: preconditions not met, informational only; max relative deviation {:.3e}, Frobenius {:.3e}",
                    s.max_relative, s.max_relative_frobenius
                ),
            }
            equiv::check(&o)
        }
        Command::Mnist(c) => {
            let Some((cfg, out)) = prepare::<mnist::MnistRun>(&c)? else { return Ok(()) };
            let o = mnist::cmd_mnist(&cfg, &out)?;
            for r in &o.summary.results {
                println!("mnist: {:?} test accuracy {:.4}", r.rule, r.test_accuracy);
            }
            mnist::check(&o)
        }
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let start = Instant::now();
    let result = dispatch(cli.command);
    eprintln!("wall clock: {:.2} s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
