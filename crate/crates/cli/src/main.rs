//! `vlmoe`: pretraining runs, ablation sweeps, expert-parallel simulation
//! and routing reports for the sparse vision-language MoE.

mod commands;
mod report;
mod runs;
mod selftest;
mod simulate;
mod spec;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::spec::{Axis, ExperimentSpec, LoadedSpec};

#[derive(Parser, Debug)]
#[command(name = "vlmoe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct SpecArgs {
    /// Experiment spec (JSON). Defaults to the toy model, seed 1.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run this single seed instead of the spec's seed list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    #[arg(long, value_name = "N")]
    steps: Option<usize>,

    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl SpecArgs {
    fn resolve(&self, axis: Option<Axis>) -> Result<(LoadedSpec, ExperimentSpec)> {
        let loaded = LoadedSpec::load(self.config.as_deref())?;
        let mut spec = loaded.spec.clone();
        if let Some(seed) = self.seed {
            spec.seeds = vec![seed];
        }
        if let Some(steps) = self.steps {
            spec.steps = steps;
        }
        if let Some(out) = &self.out {
            spec.out = out.clone();
        }
        if let Some(axis) = axis {
            if spec.axis != Some(axis) {
                spec.values = None;
            }
            spec.axis = Some(axis);
        }
        Ok((loaded, spec))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain one model per seed; writes metrics, routing logs and checkpoints.
    Train(SpecArgs),
    /// Train every value of an ablation axis and tabulate the results.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
        /// experts, strategy, aux or bpr.
        #[arg(long, value_name = "NAME")]
        axis: Option<Axis>,
    },
    /// Replay a run's routing logs on simulated expert-parallel workers.
    Simulate {
        /// Run directory holding routing.jsonl.
        run: PathBuf,
        /// Spec supplying worker count and alpha.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Cost of one token transfer in compute units.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Summarize routing decisions and drops of a run as JSON and SVG.
    Report {
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Fast sanity checks of this build.
    Selftest,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let (loaded, spec) = args.resolve(None)?;
            commands::train(&loaded, &spec)
        }
        Command::Ablate { spec, axis } => {
            let (loaded, spec) = spec.resolve(axis)?;
            commands::ablate(&loaded, &spec).map(drop)
        }
        Command::Simulate {
            run,
            config,
            workers,
            alpha,
            out,
        } => {
            let spec = LoadedSpec::load(config.as_deref())?.spec;
            let workers = workers.unwrap_or(spec.workers);
            let alpha = alpha.unwrap_or(spec.alpha);
            anyhow::ensure!(workers > 0, "workers must be positive");
            anyhow::ensure!(
                alpha.is_finite() && alpha >= 0.0,
                "alpha must be finite and non-negative"
            );
            simulate::simulate(&run, workers, alpha, out).map(drop)
        }
        Command::Report { run, out } => report::report(&run, out).map(drop),
        Command::Selftest => selftest::selftest(),
    }
}
