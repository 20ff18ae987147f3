//! Routing-decision logs and their summaries: per-expert token-kind
//! breakdowns, drop profiles and small SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{LayerRouting, Modality, TokenKind};
use crate::train::Task;

/// One (token, expert) routing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub modality: Modality,
    pub expert_id: usize,
    pub token_id: usize,
    pub gate: f64,
    pub kept: bool,
    pub step: usize,
    pub task: Task,
    pub kind: TokenKind,
    pub rank: usize,
    pub capacity: usize,
    /// Size of the expert pool that made the decision.
    pub num_experts: usize,
}

pub fn routing_records(step: usize, routing: &[(Task, LayerRouting)]) -> Vec<RoutingRecord> {
    let mut out = Vec::new();
    for (task, r) in routing {
        for a in &r.plan.assignments {
            out.push(RoutingRecord {
                layer: r.layer,
                modality: r.modality,
                expert_id: a.expert,
                token_id: r.rows[a.token],
                gate: a.gate,
                kept: a.kept,
                step,
                task: *task,
                kind: r.kinds[a.token],
                rank: a.rank,
                capacity: r.plan.capacity[a.expert],
                num_experts: r.plan.num_experts,
            });
        }
    }
    out
}

/// Kept and dropped counts for one expert, split by token kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub expert_id: usize,
    pub kept_by_kind: BTreeMap<TokenKind, usize>,
    pub dropped_by_kind: BTreeMap<TokenKind, usize>,
    pub kept: usize,
    pub dropped: usize,
}

/// Aggregate routing behavior of one expert pool across all logged steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub layer: usize,
    pub modality: Modality,
    pub experts: Vec<ExpertSummary>,
    pub kept: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    /// `(step, drop rate)` per logged step.
    pub drop_rate_by_step: Vec<(usize, f64)>,
}

type Decision = (usize, Task, usize, Modality);

/// Checks that within every logged decision group each token appears once
/// per rank and ranks are contiguous from 0.
pub fn check_conservation(records: &[RoutingRecord]) -> Result<()> {
    let mut seen: BTreeMap<Decision, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for r in records {
        seen.entry((r.step, r.task, r.layer, r.modality))
            .or_default()
            .entry(r.token_id)
            .or_default()
            .push(r.rank);
    }
    for (key, tokens) in seen {
        let mut k = None;
        for (token, mut ranks) in tokens {
            ranks.sort_unstable();
            let ok = ranks.iter().enumerate().all(|(i, &r)| i == r);
            if !ok || k.is_some_and(|k| k != ranks.len()) {
                return Err(contract(format!(
                    "token {token} at {key:?} has ranks {ranks:?}"
                )));
            }
            k = Some(ranks.len());
        }
    }
    Ok(())
}

pub fn summarize(records: &[RoutingRecord]) -> Vec<PoolSummary> {
    let mut pools: BTreeMap<(usize, Modality), Vec<&RoutingRecord>> = BTreeMap::new();
    for r in records {
        pools.entry((r.layer, r.modality)).or_default().push(r);
    }
    pools
        .into_iter()
        .map(|((layer, modality), recs)| {
            let n_experts = recs.iter().map(|r| r.expert_id + 1).max().unwrap_or(0);
            let mut experts: Vec<ExpertSummary> = (0..n_experts)
                .map(|expert_id| ExpertSummary {
                    expert_id,
                    ..ExpertSummary::default()
                })
                .collect();
            let mut by_step: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for r in &recs {
                let e = &mut experts[r.expert_id];
                let s = by_step.entry(r.step).or_default();
                if r.kept {
                    *e.kept_by_kind.entry(r.kind).or_default() += 1;
                    e.kept += 1;
                } else {
                    *e.dropped_by_kind.entry(r.kind).or_default() += 1;
                    e.dropped += 1;
                    s.1 += 1;
                }
                s.0 += 1;
            }
            let kept: usize = experts.iter().map(|e| e.kept).sum();
            let dropped: usize = experts.iter().map(|e| e.dropped).sum();
            PoolSummary {
                layer,
                modality,
                experts,
                kept,
                dropped,
                drop_rate: ratio(dropped, kept + dropped),
                drop_rate_by_step: by_step
                    .into_iter()
                    .map(|(step, (total, d))| (step, ratio(d, total)))
                    .collect(),
            }
        })
        .collect()
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn frame(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(
        s,
        r#"<rect width="100%" height="100%" fill="white"/><text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = write!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{} {y0}" stroke="black" fill="none"/>"#,
        WIDTH - MARGIN
    );
    s
}

/// Stacked bars: one bar per label, one stack layer per series.
pub fn svg_stacked_bars(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut s = frame(title);
    let totals: Vec<f64> = (0..labels.len())
        .map(|i| series.iter().map(|(_, v)| v[i]).sum())
        .collect();
    let top = totals.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let span = WIDTH - 2.0 * MARGIN;
    let slot = span / labels.len().max(1) as f64;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for (i, label) in labels.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let mut y = HEIGHT - MARGIN;
        for (j, (_, values)) in series.iter().enumerate() {
            let h = values[i] / top * plot_h;
            y -= h;
            let _ = write!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                slot * 0.7,
                PALETTE[j % PALETTE.len()]
            );
        }
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            HEIGHT - MARGIN + 14.0,
            escape(label)
        );
    }
    legend(&mut s, series.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>");
    s
}

/// Line chart of `(x, y)` series with `y` in `[0, y_max]`.
pub fn svg_lines(title: &str, series: &[(String, Vec<(f64, f64)>)], y_max: f64) -> String {
    let mut s = frame(title);
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let y_max = y_max.max(1e-12);
    let px = |x: f64| MARGIN + (x - lo) / (hi - lo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);
    for (j, (_, points)) in series.iter().enumerate() {
        let mut d = String::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.1} {:.1} ",
                if i == 0 { "M" } else { "L" },
                px(x),
                py(y)
            );
        }
        let _ = write!(
            s,
            r#"<path d="{}" stroke="{}" stroke-width="2" fill="none"/>"#,
            d.trim_end(),
            PALETTE[j % PALETTE.len()]
        );
    }
    let _ = write!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{y_max:.3}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    legend(&mut s, series.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>");
    s
}

fn legend<'a>(s: &mut String, names: impl Iterator<Item = &'a str>) {
    for (j, name) in names.enumerate() {
        let y = MARGIN + 14.0 * j as f64;
        let _ = write!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            y,
            PALETTE[j % PALETTE.len()],
            WIDTH - MARGIN - 96.0,
            y + 9.0,
            escape(name)
        );
    }
}

/// Per-expert kept tokens by kind, one chart per pool.
pub fn kind_breakdown_svg(pool: &PoolSummary) -> String {
    let mut kinds: Vec<TokenKind> = pool
        .experts
        .iter()
        .flat_map(|e| e.kept_by_kind.keys().copied())
        .collect();
    kinds.sort();
    kinds.dedup();
    let labels: Vec<String> = pool
        .experts
        .iter()
        .map(|e| format!("e{}", e.expert_id))
        .collect();
    let series: Vec<(String, Vec<f64>)> = kinds
        .iter()
        .map(|k| {
            (
                format!("{k:?}"),
                pool.experts
                    .iter()
                    .map(|e| *e.kept_by_kind.get(k).unwrap_or(&0) as f64)
                    .collect(),
            )
        })
        .collect();
    svg_stacked_bars(
        &format!(
            "{:?} pool, layer {}: kept tokens by kind",
            pool.modality, pool.layer
        ),
        &labels,
        &series,
    )
}

/// Drop rate over logged steps for every pool of one modality.
pub fn drop_profile_svg(pools: &[PoolSummary], modality: Modality) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = pools
        .iter()
        .filter(|p| p.modality == modality)
        .map(|p| {
            (
                format!("layer {}", p.layer),
                p.drop_rate_by_step
                    .iter()
                    .map(|&(s, r)| (s as f64, r))
                    .collect(),
            )
        })
        .collect();
    let top = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(0.0, f64::max);
    svg_lines(
        &format!("{modality:?} tokens dropped above capacity"),
        &series,
        if top > 0.0 { top } else { 1.0 },
    )
}
