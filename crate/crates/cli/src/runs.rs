//! Training runs and the files they leave in their directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vlmoe_core::model::{MoMEConfig, MoMEModel, ParamCounts};
use vlmoe_core::parallel::THREADS_ENV;
use vlmoe_core::train::{train, EvalRow, Progress, RunReport, StepRow, TrainConfig};

use crate::spec::{ExperimentSpec, LoadedSpec};

pub const METRICS: &str = "metrics.jsonl";
pub const EVALS: &str = "evals.jsonl";
pub const ROUTING: &str = "routing.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const MODEL_CONFIG: &str = "model_config.json";
pub const TRAIN_CONFIG: &str = "train_config.json";
pub const SUMMARY: &str = "summary.json";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(rows)
}

/// Writes the spec file exactly as it was read, plus the resolved spec
/// with command-line overrides applied.
pub fn persist_spec(out: &Path, loaded: &LoadedSpec, resolved: &ExperimentSpec) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &loaded.source {
        Some(text) => fs::write(out.join("spec.json"), text)?,
        None => write_json(&out.join("spec.json"), &loaded.spec)?,
    }
    write_json(&out.join("resolved_spec.json"), resolved)
}

/// Headline numbers of one finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub params: ParamCounts,
    pub initial: Option<EvalRow>,
    pub last: Option<EvalRow>,
    /// Mean absolute step-to-step change of the training loss over the
    /// second half of the run.
    pub instability: f64,
}

fn instability(rows: &[StepRow]) -> f64 {
    let tail = &rows[rows.len() / 2..];
    if tail.len() < 2 {
        return 0.0;
    }
    let moves: f64 = tail
        .windows(2)
        .map(|w| (w[1].loss_total - w[0].loss_total).abs())
        .sum();
    moves / (tail.len() - 1) as f64
}

struct Echo<'a>(&'a str);

impl Progress for Echo<'_> {
    fn eval(&mut self, row: &EvalRow) {
        eprintln!(
            "{} step {:>5}  val total {:.4}  mlm {:.4}  mim {:.4}  vlm {:.4}",
            self.0, row.step, row.loss_total, row.loss_mlm, row.loss_mim, row.loss_vlm
        );
    }
}

/// Trains one model into `dir`: configs, metrics, evaluations, routing
/// logs, the final checkpoint and a summary.
pub fn run_cell(
    model_cfg: &MoMEConfig,
    tc: &TrainConfig,
    dir: &Path,
    tag: &str,
) -> Result<RunSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join(MODEL_CONFIG), model_cfg)?;
    write_json(&dir.join(TRAIN_CONFIG), tc)?;
    let mut model = MoMEModel::new(model_cfg.clone(), tc.seed)?;
    let report: RunReport =
        train(&mut model, tc, &mut Echo(tag)).with_context(|| format!("training {tag} failed"))?;
    write_jsonl(&dir.join(METRICS), &report.steps)?;
    write_jsonl(&dir.join(EVALS), &report.evals)?;
    if tc.routing_log_every > 0 {
        write_jsonl(&dir.join(ROUTING), &report.routing)?;
    }
    model.store().save(&dir.join(CHECKPOINT))?;
    let summary = RunSummary {
        seed: tc.seed,
        steps: tc.steps,
        params: model_cfg.param_counts(),
        initial: report.first_eval().cloned(),
        last: report.last_eval().cloned(),
        instability: instability(&report.steps),
    };
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Worker threads for independent runs, capped by the thread variable.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Applies `f` to every job with at most [`thread_cap`] running at once.
/// Results come back in job order.
pub fn run_parallel<J, T, F>(jobs: &[J], f: F) -> Vec<Result<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync,
{
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(thread_cap()) {
        let f = &f;
        let done: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|j| s.spawn(move || f(j))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(anyhow::anyhow!("worker thread panicked")))
                })
                .collect()
        });
        out.extend(done);
    }
    out
}
