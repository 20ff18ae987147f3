//! `simulate`: replays recorded routing decisions on a modeled
//! expert-parallel topology.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vlmoe_core::parallel::{traces_from_records, LayerTrace};
use vlmoe_core::report::RoutingRecord;
use vlmoe_core::train::pool_key;

use crate::runs::{read_jsonl, write_json, ROUTING};

/// Aggregate over all logged decision groups of one expert pool.
#[derive(Debug, Clone, Serialize)]
pub struct PoolParallelism {
    pub pool: String,
    pub groups: usize,
    pub mean_load_ratio: f64,
    pub max_load_ratio: f64,
    pub max_p95_transfer: usize,
    pub mean_step_time: f64,
    pub cross_worker_transfers: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub workers: usize,
    pub alpha: f64,
    pub pools: Vec<PoolParallelism>,
}

pub fn load_routing(run: &Path) -> Result<Vec<RoutingRecord>> {
    let path = run.join(ROUTING);
    if !path.exists() {
        bail!(
            "no routing logs at {}; train with routing_log_every > 0",
            path.display()
        );
    }
    let records: Vec<RoutingRecord> = read_jsonl(&path)?;
    if records.is_empty() {
        bail!(
            "{} holds no routing decisions (dense model?)",
            path.display()
        );
    }
    Ok(records)
}

pub fn summarize(traces: &[LayerTrace], workers: usize, alpha: f64) -> SimulationSummary {
    let mut pools: BTreeMap<String, Vec<&LayerTrace>> = BTreeMap::new();
    for t in traces {
        pools
            .entry(pool_key(t.modality, t.layer))
            .or_default()
            .push(t);
    }
    let pools = pools
        .into_iter()
        .map(|(pool, ts)| {
            let n = ts.len() as f64;
            PoolParallelism {
                pool,
                groups: ts.len(),
                mean_load_ratio: ts.iter().map(|t| t.metrics.load_ratio).sum::<f64>() / n,
                max_load_ratio: ts.iter().map(|t| t.metrics.load_ratio).fold(0.0, f64::max),
                max_p95_transfer: ts.iter().map(|t| t.metrics.p95_transfer).max().unwrap_or(0),
                mean_step_time: ts.iter().map(|t| t.metrics.step_time).sum::<f64>() / n,
                cross_worker_transfers: ts.iter().map(|t| t.trace.cross_worker_transfers()).sum(),
                dropped: ts.iter().map(|t| t.trace.dropped).sum(),
            }
        })
        .collect();
    SimulationSummary {
        workers,
        alpha,
        pools,
    }
}

fn markdown(s: &SimulationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# Expert parallelism, {} workers, alpha {}\n",
        s.workers, s.alpha
    );
    let _ = writeln!(
        out,
        "| pool | groups | mean load ratio | max load ratio | max p95 transfer | mean step time | cross-worker transfers | dropped |"
    );
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|---:|");
    for p in &s.pools {
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {:.3} | {} | {:.1} | {} | {} |",
            p.pool,
            p.groups,
            p.mean_load_ratio,
            p.max_load_ratio,
            p.max_p95_transfer,
            p.mean_step_time,
            p.cross_worker_transfers,
            p.dropped
        );
    }
    out
}

pub fn simulate(
    run: &Path,
    workers: usize,
    alpha: f64,
    out: Option<PathBuf>,
) -> Result<SimulationSummary> {
    let records = load_routing(run)?;
    let traces = traces_from_records(&records, workers, alpha)
        .with_context(|| format!("simulating {workers} workers"))?;
    for t in &traces {
        t.trace.check_conservation()?;
    }
    let out = out.unwrap_or_else(|| run.join(format!("simulate-w{workers}")));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("traces.json"), &traces)?;
    let summary = summarize(&traces, workers, alpha);
    write_json(&out.join("summary.json"), &summary)?;
    let md = markdown(&summary);
    fs::write(out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(summary)
}
