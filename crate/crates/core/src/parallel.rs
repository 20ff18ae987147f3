//! Expert-parallel execution, simulated.
//!
//! Experts are sharded across logical workers and tokens start on a home
//! worker chosen by contiguous blocks of the token index. A MoE layer runs as
//! dispatch (home → expert owner), local expert compute, and return (owner →
//! home). The simulator produces the same combined output as
//! [`dispatch_combine`](crate::routing::dispatch_combine) and a trace of the
//! implied communication volume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::Modality;
use crate::report::RoutingRecord;
use crate::routing::RoutingPlan;
use crate::tensor::{gelu, Tensor};
use crate::train::Task;

/// Environment variable capping the number of OS threads in threaded mode.
pub const THREADS_ENV: &str = "VLMOE_THREADS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTopology {
    workers: usize,
    shard_map: Vec<usize>,
}

impl WorkerTopology {
    /// Assigns experts to workers in contiguous blocks of `E / W`.
    pub fn contiguous(num_experts: usize, workers: usize) -> Result<Self> {
        if workers == 0 || !num_experts.is_multiple_of(workers) {
            return Err(contract(format!(
                "{workers} workers cannot evenly own {num_experts} experts"
            )));
        }
        let per = num_experts / workers;
        Self::new(workers, (0..num_experts).map(|e| e / per).collect())
    }

    /// Explicit expert → worker map. Every worker must own exactly `E / W`
    /// experts.
    pub fn new(workers: usize, shard_map: Vec<usize>) -> Result<Self> {
        let e = shard_map.len();
        if workers == 0 || e == 0 || !e.is_multiple_of(workers) {
            return Err(contract(format!(
                "{workers} workers cannot evenly own {e} experts"
            )));
        }
        let mut owned = vec![0usize; workers];
        for &w in &shard_map {
            if w >= workers {
                return Err(contract(format!("expert mapped to missing worker {w}")));
            }
            owned[w] += 1;
        }
        if owned.iter().any(|&c| c != e / workers) {
            return Err(contract("shard map gives workers unequal expert counts"));
        }
        Ok(Self { workers, shard_map })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn num_experts(&self) -> usize {
        self.shard_map.len()
    }

    pub fn experts_per_worker(&self) -> usize {
        self.shard_map.len() / self.workers
    }

    pub fn owner(&self, expert: usize) -> usize {
        self.shard_map[expert]
    }

    /// Experts owned by `worker`, ascending.
    pub fn shard(&self, worker: usize) -> Vec<usize> {
        (0..self.shard_map.len())
            .filter(|&e| self.shard_map[e] == worker)
            .collect()
    }

    /// Worker on which token `t` of `n` lives before dispatch.
    pub fn home(&self, t: usize, n: usize) -> usize {
        t * self.workers / n.max(1)
    }
}

/// Token counts moved between and computed on workers for one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeTrace {
    pub workers: usize,
    /// `dispatch[src][dst]`: tokens sent from their home `src` to the
    /// owner `dst` of the chosen expert.
    pub dispatch: Vec<Vec<usize>>,
    /// `returned[src][dst]`: expert outputs sent back from `src` to the
    /// token's home `dst`.
    pub returned: Vec<Vec<usize>>,
    /// Tokens processed by each worker's experts.
    pub compute: Vec<usize>,
    /// Buffer capacity of each worker (expert capacity × experts owned).
    pub worker_capacity: Vec<usize>,
    pub dropped: usize,
}

impl ExchangeTrace {
    /// Counts the communication implied by `plan` under `topology`.
    pub fn from_plan(plan: &RoutingPlan, topology: &WorkerTopology) -> Result<Self> {
        check_topology(plan.num_experts, topology)?;
        let assignments = plan.assignments.iter().map(|a| (a.token, a.expert, a.kept));
        let worker_capacity = (0..topology.workers)
            .map(|w| topology.shard(w).iter().map(|&e| plan.capacity[e]).sum())
            .collect();
        Ok(Self::count(
            plan.num_tokens,
            assignments,
            topology,
            worker_capacity,
        ))
    }

    fn count(
        n: usize,
        assignments: impl Iterator<Item = (usize, usize, bool)>,
        topology: &WorkerTopology,
        worker_capacity: Vec<usize>,
    ) -> Self {
        let w = topology.workers;
        let mut dispatch = vec![vec![0; w]; w];
        let mut compute = vec![0; w];
        let mut dropped = 0;
        for (token, expert, kept) in assignments {
            if !kept {
                dropped += 1;
                continue;
            }
            let (src, dst) = (topology.home(token, n), topology.owner(expert));
            dispatch[src][dst] += 1;
            compute[dst] += 1;
        }
        let returned = (0..w)
            .map(|src| (0..w).map(|dst| dispatch[dst][src]).collect())
            .collect();
        Self {
            workers: w,
            dispatch,
            returned,
            compute,
            worker_capacity,
            dropped,
        }
    }

    /// Total tokens sent across worker boundaries in both phases.
    pub fn cross_worker_transfers(&self) -> usize {
        let off = |m: &Vec<Vec<usize>>| -> usize {
            (0..self.workers)
                .flat_map(|i| (0..self.workers).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| m[i][j])
                .sum()
        };
        off(&self.dispatch) + off(&self.returned)
    }

    /// Tokens each worker sends to other workers, dispatch plus return.
    pub fn transfer_volume(&self) -> Vec<usize> {
        (0..self.workers)
            .map(|i| {
                (0..self.workers)
                    .filter(|&j| j != i)
                    .map(|j| self.dispatch[i][j] + self.returned[i][j])
                    .sum()
            })
            .collect()
    }

    /// Dispatched = computed = returned on every worker, and computed
    /// tokens fit the worker's buffers.
    pub fn check_conservation(&self) -> Result<()> {
        for w in 0..self.workers {
            let received: usize = (0..self.workers).map(|s| self.dispatch[s][w]).sum();
            let sent_back: usize = self.returned[w].iter().sum();
            if received != self.compute[w] || sent_back != self.compute[w] {
                return Err(contract(format!(
                    "worker {w}: received {received}, computed {}, returned {sent_back}",
                    self.compute[w]
                )));
            }
            if self.compute[w] > self.worker_capacity[w] {
                return Err(contract(format!("worker {w} exceeds its buffer capacity")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_topology(num_experts: usize, topology: &WorkerTopology) -> Result<()> {
    if topology.num_experts() != num_experts {
        return Err(contract(format!(
            "topology shards {} experts but the plan routes to {num_experts}",
            topology.num_experts()
        )));
    }
    Ok(())
}

/// Weights of one feed-forward expert, `W2 · gelu(W1 · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ExpertWeights {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?.map(gelu).matmul(&self.w2)
    }
}

/// How expert compute is executed inside the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    /// One scoped thread per worker group, capped by the given count.
    Threaded(usize),
}

impl Execution {
    /// Threaded when `VLMOE_THREADS` is set above 1, sequential otherwise.
    pub fn from_env() -> Self {
        match std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            Some(n) if n > 1 => Self::Threaded(n),
            _ => Self::Sequential,
        }
    }
}

/// Per-worker expert outputs: for each owned expert, the kept tokens in slot
/// order and their gate-weighted outputs.
type WorkerResult = Vec<(usize, Vec<usize>, Tensor)>;

fn run_worker(
    worker: usize,
    tokens: &Tensor,
    plan: &RoutingPlan,
    topology: &WorkerTopology,
    experts: &[ExpertWeights],
) -> Result<WorkerResult> {
    let d = tokens.last_dim();
    let mut out = Vec::new();
    for e in topology.shard(worker) {
        let idx = plan.expert_tokens(e);
        if idx.is_empty() {
            continue;
        }
        let mut buf = Vec::with_capacity(idx.len() * d);
        for &t in &idx {
            buf.extend_from_slice(tokens.row(t));
        }
        let mut y = experts[e].apply(&Tensor::new(vec![idx.len(), d], buf)?)?;
        for (r, &t) in idx.iter().enumerate() {
            let g = plan.gates.at(t, e);
            y.row_mut(r).iter_mut().for_each(|v| *v *= g);
        }
        out.push((e, idx, y));
    }
    Ok(out)
}

/// Runs one MoE layer under expert parallelism and returns the combined
/// `[n × D]` output together with its exchange trace.
pub fn simulate_layer(
    tokens: &Tensor,
    plan: &RoutingPlan,
    experts: &[ExpertWeights],
    topology: &WorkerTopology,
    execution: Execution,
) -> Result<(Tensor, ExchangeTrace)> {
    check_topology(plan.num_experts, topology)?;
    if tokens.ndim() != 2 || tokens.rows() != plan.num_tokens {
        return Err(contract(format!(
            "plan covers {} tokens but {:?} were given",
            plan.num_tokens,
            tokens.shape()
        )));
    }
    if experts.len() != plan.num_experts {
        return Err(contract("expert count does not match the routing plan"));
    }
    let trace = ExchangeTrace::from_plan(plan, topology)?;
    let w = topology.workers();
    let results: Vec<WorkerResult> = match execution {
        Execution::Threaded(cap) if cap > 1 && w > 1 => {
            let per_thread = w.div_ceil(cap.min(w));
            let groups: Vec<Vec<usize>> = (0..w)
                .collect::<Vec<_>>()
                .chunks(per_thread)
                .map(<[usize]>::to_vec)
                .collect();
            let joined: Vec<Result<Vec<WorkerResult>>> = std::thread::scope(|s| {
                let handles: Vec<_> = groups
                    .iter()
                    .map(|g| {
                        s.spawn(move || {
                            g.iter()
                                .map(|&wk| run_worker(wk, tokens, plan, topology, experts))
                                .collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("simulator worker thread panicked"))
                    .collect()
            });
            let mut flat = Vec::with_capacity(w);
            for r in joined {
                flat.extend(r?);
            }
            flat
        }
        _ => (0..w)
            .map(|wk| run_worker(wk, tokens, plan, topology, experts))
            .collect::<Result<_>>()?,
    };

    // Return phase: contributions arrive in expert order so the summation
    // order matches the single-process reference.
    let mut by_expert: Vec<Option<&(usize, Vec<usize>, Tensor)>> = vec![None; plan.num_experts];
    for r in results.iter().flatten() {
        by_expert[r.0] = Some(r);
    }
    let mut out = Tensor::zeros(tokens.shape());
    for (_, idx, y) in by_expert.into_iter().flatten() {
        for (r, &t) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(t).iter_mut().zip(y.row(r)) {
                *o += v;
            }
        }
    }
    Ok((out, trace))
}

/// Load balance and overhead estimates derived from a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceMetrics {
    /// Largest worker compute load over the mean; 1.0 when idle.
    pub load_ratio: f64,
    /// Nearest-rank 95th percentile of per-worker transfer volume.
    pub p95_transfer: usize,
    pub max_compute: usize,
    pub max_transfer: usize,
    /// `max_compute + alpha · max_transfer`, in token-compute units.
    pub step_time: f64,
    pub alpha: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.1;

pub fn imbalance_metrics(trace: &ExchangeTrace, alpha: f64) -> ImbalanceMetrics {
    let max_compute = trace.compute.iter().copied().max().unwrap_or(0);
    let total: usize = trace.compute.iter().sum();
    let load_ratio = if total == 0 {
        1.0
    } else {
        max_compute as f64 * trace.workers as f64 / total as f64
    };
    let mut volume = trace.transfer_volume();
    volume.sort_unstable();
    let max_transfer = volume.last().copied().unwrap_or(0);
    let p95_transfer = if volume.is_empty() {
        0
    } else {
        let rank = (0.95 * volume.len() as f64).ceil() as usize;
        volume[rank.clamp(1, volume.len()) - 1]
    };
    ImbalanceMetrics {
        load_ratio,
        p95_transfer,
        max_compute,
        max_transfer,
        step_time: max_compute as f64 + alpha * max_transfer as f64,
        alpha,
    }
}

/// Trace of one logged routing decision group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub step: usize,
    pub task: Task,
    pub layer: usize,
    pub modality: Modality,
    pub trace: ExchangeTrace,
    pub metrics: ImbalanceMetrics,
}

/// Rebuilds exchange traces from routing logs, one per
/// (step, task, layer, modality) group. Tokens are numbered by ascending
/// row within their group to choose home workers.
pub fn traces_from_records(
    records: &[RoutingRecord],
    workers: usize,
    alpha: f64,
) -> Result<Vec<LayerTrace>> {
    type Key = (usize, Task, usize, Modality);
    let mut groups: BTreeMap<Key, Vec<&RoutingRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.step, r.task, r.layer, r.modality))
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((step, task, layer, modality), recs) in groups {
        let experts = recs.iter().map(|r| r.num_experts).max().unwrap_or(0);
        if let Some(r) = recs
            .iter()
            .find(|r| r.num_experts != experts || r.expert_id >= experts)
        {
            return Err(contract(format!(
                "record for expert {} of {} disagrees with pool size {experts}",
                r.expert_id, r.num_experts
            )));
        }
        let topology = WorkerTopology::contiguous(experts, workers)?;
        let mut rows: Vec<usize> = recs.iter().map(|r| r.token_id).collect();
        rows.sort_unstable();
        rows.dedup();
        let local = |row: usize| rows.binary_search(&row).unwrap_or(0);
        let mut cap = vec![0usize; experts];
        for r in &recs {
            cap[r.expert_id] = r.capacity;
        }
        let uniform = recs.first().map(|r| r.capacity).unwrap_or(0);
        let worker_capacity = (0..workers)
            .map(|w| topology.shard(w).iter().map(|&e| cap[e].max(uniform)).sum())
            .collect();
        let trace = ExchangeTrace::count(
            rows.len(),
            recs.iter()
                .map(|r| (local(r.token_id), r.expert_id, r.kept)),
            &topology,
            worker_capacity,
        );
        let metrics = imbalance_metrics(&trace, alpha);
        out.push(LayerTrace {
            step,
            task,
            layer,
            modality,
            trace,
            metrics,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::assign_vanilla;

    fn one_hot(n: usize, e: usize, pick: impl Fn(usize) -> usize) -> Tensor {
        let mut g = Tensor::zeros(&[n, e]);
        for t in 0..n {
            let row = g.row_mut(t);
            row.iter_mut().for_each(|v| *v = 0.1 / (e - 1) as f64);
            row[pick(t)] = 0.9;
        }
        g
    }

    #[test]
    fn topology_requires_even_shards() {
        assert!(WorkerTopology::contiguous(4, 3).is_err());
        assert!(WorkerTopology::new(2, vec![0, 0, 0, 1]).is_err());
        assert!(WorkerTopology::new(2, vec![0, 2, 1, 1]).is_err());
        let t = WorkerTopology::new(2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(t.shard(1), vec![0, 3]);
        assert_eq!(t.experts_per_worker(), 2);
    }

    #[test]
    fn single_worker_has_no_transfers() {
        let plan = assign_vanilla(&one_hot(8, 4, |t| t % 4), 1, 4).unwrap();
        let trace =
            ExchangeTrace::from_plan(&plan, &WorkerTopology::contiguous(4, 1).unwrap()).unwrap();
        assert_eq!(trace.cross_worker_transfers(), 0);
        assert_eq!(trace.compute, vec![8]);
        trace.check_conservation().unwrap();
    }

    #[test]
    fn balanced_plan_fills_each_worker_to_capacity() {
        let plan = assign_vanilla(&one_hot(16, 4, |t| t % 4), 1, 4).unwrap();
        let trace =
            ExchangeTrace::from_plan(&plan, &WorkerTopology::contiguous(4, 4).unwrap()).unwrap();
        assert_eq!(trace.compute, vec![4; 4]);
        assert_eq!(trace.compute, trace.worker_capacity);
        assert_eq!(imbalance_metrics(&trace, DEFAULT_ALPHA).load_ratio, 1.0);
    }

    #[test]
    fn concentrated_load_ratio_equals_worker_count() {
        let plan = assign_vanilla(&one_hot(16, 4, |_| 2), 1, 16).unwrap();
        let trace =
            ExchangeTrace::from_plan(&plan, &WorkerTopology::contiguous(4, 4).unwrap()).unwrap();
        let m = imbalance_metrics(&trace, 0.5);
        assert_eq!(m.load_ratio, 4.0);
        assert_eq!(m.max_compute, 16);
        // worker 2 returns 12 tokens to three other homes
        assert_eq!(m.max_transfer, 12);
        assert_eq!(m.step_time, 16.0 + 0.5 * 12.0);
    }

    #[test]
    fn mismatched_topology_is_rejected() {
        let plan = assign_vanilla(&one_hot(4, 4, |t| t), 1, 2).unwrap();
        let topo = WorkerTopology::contiguous(8, 2).unwrap();
        assert!(ExchangeTrace::from_plan(&plan, &topo).is_err());
    }

    #[test]
    fn p95_uses_nearest_rank() {
        let trace = ExchangeTrace {
            workers: 2,
            dispatch: vec![vec![0, 3], vec![1, 0]],
            returned: vec![vec![0, 1], vec![3, 0]],
            compute: vec![1, 3],
            worker_capacity: vec![4, 4],
            dropped: 0,
        };
        trace.check_conservation().unwrap();
        let m = imbalance_metrics(&trace, DEFAULT_ALPHA);
        assert_eq!(trace.transfer_volume(), vec![4, 4]);
        assert_eq!(m.p95_transfer, 4);
        assert_eq!(m.load_ratio, 1.5);
    }
}
