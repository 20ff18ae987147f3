//! `train` and `ablate`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use vlmoe_core::train::TrainConfig;

use crate::runs::{persist_spec, run_cell, run_parallel, seed_dir, write_json, RunSummary};
use crate::spec::{Cell, ExperimentSpec, LoadedSpec};

fn run_seeds(
    cell: &Cell,
    base: &TrainConfig,
    seeds: &[u64],
    root: &Path,
) -> Result<Vec<RunSummary>> {
    let jobs: Vec<(&Cell, u64)> = seeds.iter().map(|&s| (cell, s)).collect();
    run_parallel(&jobs, |&(cell, seed)| {
        let tc = TrainConfig {
            seed,
            ..base.clone()
        };
        let tag = if cell.label.is_empty() {
            format!("seed {seed}")
        } else {
            format!("{} seed {seed}", cell.label)
        };
        run_cell(&cell.model, &tc, &seed_dir(root, seed), &tag)
    })
    .into_iter()
    .collect()
}

pub fn train(loaded: &LoadedSpec, spec: &ExperimentSpec) -> Result<()> {
    let plan = spec.plan(&loaded.base_dir, false)?;
    persist_spec(&spec.out, loaded, spec)?;
    let summaries = run_seeds(&plan.cells[0], &plan.train, &plan.seeds, &spec.out)?;
    for s in &summaries {
        let (first, last) = (s.initial.as_ref(), s.last.as_ref());
        println!(
            "seed {}: {} steps, val total {:.4} -> {:.4}, run dir {}",
            s.seed,
            s.steps,
            first.map_or(f64::NAN, |e| e.loss_total),
            last.map_or(f64::NAN, |e| e.loss_total),
            seed_dir(&spec.out, s.seed).display()
        );
    }
    Ok(())
}

/// One row of an ablation table, averaged over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub value: String,
    pub params_per_token: usize,
    pub total_params: usize,
    pub val_total: f64,
    pub val_mlm: f64,
    pub val_mim: f64,
    pub val_vlm: f64,
    /// Mean drop rate over expert pools at the final evaluation.
    pub drop_rate: f64,
    pub instability: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn row(cell: &Cell, runs: &[RunSummary]) -> AblationRow {
    let last: Vec<_> = runs.iter().filter_map(|r| r.last.as_ref()).collect();
    let params = cell.model.param_counts();
    AblationRow {
        cell: cell.label.clone(),
        value: cell.setting.map(|s| s.value()).unwrap_or_default(),
        params_per_token: params.applied_per_token,
        total_params: params.total,
        val_total: mean(last.iter().map(|e| e.loss_total)),
        val_mlm: mean(last.iter().map(|e| e.loss_mlm)),
        val_mim: mean(last.iter().map(|e| e.loss_mim)),
        val_vlm: mean(last.iter().map(|e| e.loss_vlm)),
        drop_rate: mean(
            last.iter()
                .flat_map(|e| e.drop_rate_by_layer.values().copied()),
        ),
        instability: mean(runs.iter().map(|r| r.instability)),
        seeds: runs.iter().map(|r| r.seed).collect(),
    }
}

pub fn markdown(table: &AblationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Ablation over {} ({} steps)\n",
        table.axis, table.steps
    );
    let _ = writeln!(
        s,
        "| {} | params/token | total params | val total | MLM | MIM | VLM | drop rate | instability |",
        table.axis
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.value,
            r.params_per_token,
            r.total_params,
            r.val_total,
            r.val_mlm,
            r.val_mim,
            r.val_vlm,
            r.drop_rate,
            r.instability
        );
    }
    s
}

pub fn ablate(loaded: &LoadedSpec, spec: &ExperimentSpec) -> Result<AblationTable> {
    let plan = spec.plan(&loaded.base_dir, true)?;
    persist_spec(&spec.out, loaded, spec)?;
    let jobs: Vec<(usize, u64)> = (0..plan.cells.len())
        .flat_map(|c| plan.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = run_parallel(&jobs, |&(c, seed)| {
        let cell = &plan.cells[c];
        let tc = TrainConfig {
            seed,
            ..plan.train.clone()
        };
        let dir = seed_dir(&spec.out.join(&cell.label), seed);
        run_cell(
            &cell.model,
            &tc,
            &dir,
            &format!("{} seed {seed}", cell.label),
        )
    });
    let mut by_cell: BTreeMap<usize, Vec<RunSummary>> = BTreeMap::new();
    for (&(c, _), r) in jobs.iter().zip(results) {
        by_cell.entry(c).or_default().push(r?);
    }
    let table = AblationTable {
        axis: spec.axis.map(|a| a.name()).unwrap_or_default().to_string(),
        steps: spec.steps,
        rows: plan
            .cells
            .iter()
            .enumerate()
            .map(|(i, cell)| row(cell, &by_cell[&i]))
            .collect(),
    };
    write_json(&spec.out.join("ablation.json"), &table)?;
    let md = markdown(&table);
    fs::write(spec.out.join("ablation.md"), &md)
        .with_context(|| format!("writing {}", spec.out.join("ablation.md").display()))?;
    print!("{md}");
    Ok(table)
}
