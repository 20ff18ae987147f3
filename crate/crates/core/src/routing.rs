//! Sparse top-k expert routing with fixed per-expert buffer capacity.
//!
//! The gating network produces a softmax over experts for every token. Each
//! token selects its `k` largest gates; assignments then claim slots in the
//! chosen experts' buffers, rank round by rank round. Within a round, tokens
//! go in index order ([`Priority::Index`]) or in descending order of their
//! largest gate ([`Priority::GateWeight`], Batch Priority Routing). An
//! assignment that finds its buffer full is dropped: the token receives no
//! output from that expert and survives through the residual path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Gating parameters of one MoE layer.
#[derive(Debug, Clone, Copy)]
pub struct RouterParams<'t> {
    /// `[E × D]` gating matrix.
    pub weight: Var<'t>,
    /// Standard deviation of the routing noise; `0` disables it.
    pub noise_sigma: f64,
}

impl<'t> RouterParams<'t> {
    /// Router with the default noise scale `1 / E`.
    pub fn new(weight: Var<'t>) -> Result<Self> {
        let e = Self::check(weight)?;
        Ok(Self {
            weight,
            noise_sigma: 1.0 / e as f64,
        })
    }

    pub fn with_sigma(weight: Var<'t>, noise_sigma: f64) -> Result<Self> {
        Self::check(weight)?;
        if noise_sigma.is_nan() || noise_sigma < 0.0 {
            return Err(contract("router noise sigma must be nonnegative"));
        }
        Ok(Self {
            weight,
            noise_sigma,
        })
    }

    fn check(weight: Var<'t>) -> Result<usize> {
        let shape = weight.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Dimension {
                op: "router",
                lhs: shape,
                rhs: vec![],
            });
        }
        Ok(shape[0])
    }

    pub fn num_experts(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput<'t> {
    /// `softmax(noisy_logits)`, `[n × E]`.
    pub gates: Var<'t>,
    pub clean_logits: Var<'t>,
    /// Clean logits plus the sampled noise (identical to the clean logits
    /// outside training).
    pub noisy_logits: Var<'t>,
}

/// Computes gating weights for `tokens` (`[n × D]`).
pub fn gate<'t, R: Rng + ?Sized>(
    router: &RouterParams<'t>,
    tokens: Var<'t>,
    training: bool,
    rng: &mut R,
) -> Result<GateOutput<'t>> {
    let (ts, ws) = (tokens.shape(), router.weight.shape());
    if ts.len() != 2 || ts[1] != ws[1] {
        return Err(Error::Dimension {
            op: "gate",
            lhs: ts,
            rhs: ws,
        });
    }
    let clean = tokens.matmul_t(router.weight)?;
    let noisy = if training && router.noise_sigma > 0.0 {
        let shape = clean.shape();
        let noise = Tensor::randn(&shape, router.noise_sigma, rng);
        clean.add(tokens.tape().constant(noise))?
    } else {
        clean
    };
    Ok(GateOutput {
        gates: noisy.softmax(),
        clean_logits: clean,
        noisy_logits: noisy,
    })
}

/// Train/inference capacity factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPolicy {
    pub factor_train: f64,
    pub factor_infer: f64,
}

impl Default for CapacityPolicy {
    fn default() -> Self {
        Self {
            factor_train: 1.05,
            factor_infer: 1.0,
        }
    }
}

impl CapacityPolicy {
    pub fn factor(&self, training: bool) -> f64 {
        if training {
            self.factor_train
        } else {
            self.factor_infer
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_train > 0.0 && self.factor_infer > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("capacity factors must be positive".into()))
        }
    }
}

/// Per-expert buffer size `ceil(C · k · n / E)`, at least 1.
pub fn compute_capacity(n_tokens: usize, num_experts: usize, k: usize, factor: f64) -> usize {
    let raw = factor * (k * n_tokens) as f64 / num_experts as f64;
    // guard against 26.250000000000004-style representation error
    let snapped = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (snapped as usize).max(1)
}

/// Order in which tokens claim expert buffer slots within a rank round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    /// Ascending token index.
    #[default]
    Index,
    /// Descending largest gate weight (Batch Priority Routing).
    GateWeight,
}

/// One (token, expert) routing choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub token: usize,
    pub expert: usize,
    /// 0 for the top choice, up to `k - 1`.
    pub rank: usize,
    pub gate: f64,
    pub kept: bool,
    /// Buffer position inside the expert when kept.
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub num_tokens: usize,
    pub num_experts: usize,
    pub k: usize,
    pub gates: Tensor,
    /// Buffer size of each expert.
    pub capacity: Vec<usize>,
    /// Token-major, rank-minor list of all `n · k` assignments.
    pub assignments: Vec<Assignment>,
}

/// Indices of the `k` largest entries, largest first, ties to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn assign(gates: &Tensor, k: usize, capacity: usize, priority: Priority) -> Result<RoutingPlan> {
    if gates.ndim() != 2 {
        return Err(Error::Dimension {
            op: "assign",
            lhs: gates.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, e) = (gates.shape()[0], gates.shape()[1]);
    if capacity == 0 {
        return Err(contract("expert capacity must be at least 1"));
    }
    if k == 0 || k > e {
        return Err(contract(format!("top-k must be in 1..={e}, got {k}")));
    }
    let selected: Vec<Vec<usize>> = (0..n).map(|t| top_k(gates.row(t), k)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    if priority == Priority::GateWeight {
        let top = |t: usize| gates.at(t, selected[t][0]);
        order.sort_by(|&a, &b| top(b).total_cmp(&top(a)).then(a.cmp(&b)));
    }
    let mut assignments: Vec<Assignment> = (0..n)
        .flat_map(|t| {
            selected[t]
                .iter()
                .enumerate()
                .map(move |(rank, &expert)| (t, rank, expert))
        })
        .map(|(token, rank, expert)| Assignment {
            token,
            expert,
            rank,
            gate: gates.at(token, expert),
            kept: false,
            slot: None,
        })
        .collect();
    let mut fill = vec![0usize; e];
    for rank in 0..k {
        for &t in &order {
            let a = &mut assignments[t * k + rank];
            if fill[a.expert] < capacity {
                a.kept = true;
                a.slot = Some(fill[a.expert]);
                fill[a.expert] += 1;
            }
        }
    }
    Ok(RoutingPlan {
        num_tokens: n,
        num_experts: e,
        k,
        gates: gates.clone(),
        capacity: vec![capacity; e],
        assignments,
    })
}

/// Fills buffers in ascending token order, rank round by rank round.
pub fn assign_vanilla(gates: &Tensor, k: usize, capacity: usize) -> Result<RoutingPlan> {
    assign(gates, k, capacity, Priority::Index)
}

/// Batch Priority Routing: fills buffers in descending order of each
/// token's largest gate weight.
pub fn assign_bpr(gates: &Tensor, k: usize, capacity: usize) -> Result<RoutingPlan> {
    assign(gates, k, capacity, Priority::GateWeight)
}

pub fn assign_with(
    gates: &Tensor,
    k: usize,
    capacity: usize,
    priority: Priority,
) -> Result<RoutingPlan> {
    assign(gates, k, capacity, priority)
}

impl RoutingPlan {
    /// Kept tokens of expert `e`, in slot order.
    pub fn expert_tokens(&self, e: usize) -> Vec<usize> {
        let mut kept: Vec<(usize, usize)> = self
            .assignments
            .iter()
            .filter(|a| a.expert == e && a.kept)
            .map(|a| (a.slot.unwrap_or(0), a.token))
            .collect();
        kept.sort_unstable();
        kept.into_iter().map(|(_, t)| t).collect()
    }

    pub fn kept_gate_mass(&self) -> f64 {
        self.assignments
            .iter()
            .filter(|a| a.kept)
            .map(|a| a.gate)
            .sum()
    }

    /// Checks conservation, capacity and slot uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.assignments.len() != self.num_tokens * self.k {
            return Err(contract("plan does not hold n * k assignments"));
        }
        let mut per_token = vec![0usize; self.num_tokens];
        let mut slots = vec![Vec::new(); self.num_experts];
        for a in &self.assignments {
            per_token[a.token] += 1;
            if a.kept != a.slot.is_some() {
                return Err(contract("kept flag and slot disagree"));
            }
            if let Some(s) = a.slot {
                slots[a.expert].push(s);
            }
        }
        if per_token.iter().any(|&c| c != self.k) {
            return Err(contract("a token does not appear in exactly k assignments"));
        }
        for (e, mut s) in slots.into_iter().enumerate() {
            if s.len() > self.capacity[e] {
                return Err(contract(format!("expert {e} exceeds its capacity")));
            }
            s.sort_unstable();
            if s.iter().enumerate().any(|(i, &v)| i != v) {
                return Err(contract(format!("expert {e} has non-contiguous slots")));
            }
        }
        Ok(())
    }
}

/// Two-layer GeLU feed-forward network `W2 · gelu(W1 · x)` applied to rows.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward<'t> {
    /// `[D × H]`
    pub w1: Var<'t>,
    /// `[H × D]`
    pub w2: Var<'t>,
}

impl<'t> FeedForward<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.w1)?.gelu().matmul(self.w2)
    }
}

/// Sends every kept assignment's token through its expert and sums the
/// gate-weighted outputs per token. Dropped assignments contribute zero.
pub fn dispatch_combine<'t>(
    tokens: Var<'t>,
    gates: Var<'t>,
    plan: &RoutingPlan,
    experts: &[FeedForward<'t>],
) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[0] != plan.num_tokens {
        return Err(contract(format!(
            "plan covers {} tokens but {:?} were given",
            plan.num_tokens, shape
        )));
    }
    if gates.shape() != [plan.num_tokens, plan.num_experts] || experts.len() != plan.num_experts {
        return Err(contract("gates or experts do not match the routing plan"));
    }
    let n = shape[0];
    let tape = tokens.tape();
    let mut parts = Vec::new();
    let mut dest = Vec::new();
    for (e, expert) in experts.iter().enumerate() {
        let idx = plan.expert_tokens(e);
        if idx.is_empty() {
            continue;
        }
        let coords: Vec<(usize, usize)> = idx.iter().map(|&t| (t, e)).collect();
        let weights = gates.pick(&coords)?;
        let y = expert.forward(tokens.gather_rows(&idx)?)?;
        parts.push(y.scale_rows(weights)?);
        dest.extend(idx);
    }
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&shape)));
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)?
    };
    stacked.scatter_rows(&dest, n)
}

/// Kept/dropped accounting of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropStats {
    pub kept_per_expert: Vec<usize>,
    pub dropped_per_expert: Vec<usize>,
    pub kept: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub success_rate: f64,
}

pub fn drop_stats(plan: &RoutingPlan) -> DropStats {
    let mut kept_per_expert = vec![0; plan.num_experts];
    let mut dropped_per_expert = vec![0; plan.num_experts];
    for a in &plan.assignments {
        if a.kept {
            kept_per_expert[a.expert] += 1;
        } else {
            dropped_per_expert[a.expert] += 1;
        }
    }
    let kept: usize = kept_per_expert.iter().sum();
    let dropped: usize = dropped_per_expert.iter().sum();
    let total = kept + dropped;
    let drop_rate = if total == 0 {
        0.0
    } else {
        dropped as f64 / total as f64
    };
    DropStats {
        kept_per_expert,
        dropped_per_expert,
        kept,
        dropped,
        drop_rate,
        success_rate: 1.0 - drop_rate,
    }
}
