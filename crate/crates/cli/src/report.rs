//! `report`: routing-decision breakdowns, drop profiles and loss curves
//! of one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vlmoe_core::model::Modality;
use vlmoe_core::report::{
    check_conservation, drop_profile_svg, kind_breakdown_svg, summarize, svg_lines, PoolSummary,
    RoutingRecord,
};
use vlmoe_core::train::{pool_key, EvalRow, StepRow};

use crate::runs::{read_jsonl, write_json, EVALS, METRICS};
use crate::simulate::load_routing;

#[derive(Debug, Clone, Serialize)]
pub struct RoutingReport {
    pub logged_steps: Vec<usize>,
    pub decisions: usize,
    pub pools: Vec<PoolSummary>,
    /// Logged (step, pool) groups whose kept counts were compared with
    /// the metrics stream.
    pub checked_against_metrics: usize,
}

/// Kept counts per expert from the logs must equal what the step rows
/// recorded for the same step and pool.
fn cross_check(records: &[RoutingRecord], steps: &[StepRow]) -> Result<usize> {
    let mut kept: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for r in records {
        let v = kept
            .entry((r.step, pool_key(r.modality, r.layer)))
            .or_default();
        if v.len() <= r.expert_id {
            v.resize(r.expert_id + 1, 0);
        }
        v[r.expert_id] += usize::from(r.kept);
    }
    let rows: BTreeMap<usize, &StepRow> = steps.iter().map(|r| (r.step, r)).collect();
    let mut checked = 0;
    for ((step, pool), counts) in &kept {
        let Some(row) = rows.get(step) else { continue };
        let Some(logged) = row.expert_load.get(pool) else {
            bail!("step {step} has routing logs for {pool} but no load in the metrics");
        };
        let width = logged.len().max(counts.len());
        let pad = |v: &[usize]| {
            let mut v = v.to_vec();
            v.resize(width, 0);
            v
        };
        if pad(logged) != pad(counts) {
            bail!("step {step} pool {pool}: logs keep {counts:?} but metrics recorded {logged:?}");
        }
        checked += 1;
    }
    Ok(checked)
}

fn loss_svg(evals: &[EvalRow]) -> String {
    let pick = |f: fn(&EvalRow) -> f64| evals.iter().map(|e| (e.step as f64, f(e))).collect();
    let series: Vec<(String, Vec<(f64, f64)>)> = vec![
        ("total".into(), pick(|e| e.loss_total)),
        ("mlm".into(), pick(|e| e.loss_mlm)),
        ("mim".into(), pick(|e| e.loss_mim)),
        ("vlm".into(), pick(|e| e.loss_vlm)),
    ];
    let top = evals.iter().map(|e| e.loss_total).fold(0.0, f64::max);
    svg_lines(
        "Validation loss",
        &series,
        if top > 0.0 { top } else { 1.0 },
    )
}

fn markdown(report: &RoutingReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Routing report\n");
    let _ = writeln!(
        s,
        "{} decisions over logged steps {:?}\n",
        report.decisions, report.logged_steps
    );
    let _ = writeln!(s, "| pool | kept | dropped | drop rate | kept per expert |");
    let _ = writeln!(s, "|---|---:|---:|---:|---|");
    for p in &report.pools {
        let per: Vec<String> = p.experts.iter().map(|e| e.kept.to_string()).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {} |",
            pool_key(p.modality, p.layer),
            p.kept,
            p.dropped,
            p.drop_rate,
            per.join(" / ")
        );
    }
    s
}

pub fn report(run: &Path, out: Option<PathBuf>) -> Result<RoutingReport> {
    let records = load_routing(run)?;
    check_conservation(&records).context("routing logs are inconsistent")?;
    let metrics = run.join(METRICS);
    let checked = if metrics.exists() {
        cross_check(&records, &read_jsonl(&metrics)?)?
    } else {
        0
    };
    let mut logged_steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    logged_steps.dedup();
    let report = RoutingReport {
        logged_steps,
        decisions: records.len(),
        pools: summarize(&records),
        checked_against_metrics: checked,
    };

    let out = out.unwrap_or_else(|| run.join("report"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("summary.json"), &report)?;
    for p in &report.pools {
        let name = format!(
            "kinds-{}.svg",
            pool_key(p.modality, p.layer).replace('.', "-layer")
        );
        fs::write(out.join(name), kind_breakdown_svg(p))?;
    }
    for (m, name) in [
        (Modality::Text, "drops-text.svg"),
        (Modality::Image, "drops-image.svg"),
    ] {
        if report.pools.iter().any(|p| p.modality == m) {
            fs::write(out.join(name), drop_profile_svg(&report.pools, m))?;
        }
    }
    let evals = run.join(EVALS);
    if evals.exists() {
        fs::write(out.join("loss.svg"), loss_svg(&read_jsonl(&evals)?))?;
    }
    let md = markdown(&report);
    fs::write(out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(report)
}
