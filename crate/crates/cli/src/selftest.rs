//! `selftest`: quick end-to-end sanity checks of an installed build.

use anyhow::{ensure, Result};
use vlmoe_core::model::{MoMEConfig, MoMEModel};
use vlmoe_core::parallel::{simulate_layer, Execution, ExpertWeights, WorkerTopology};
use vlmoe_core::report::check_conservation;
use vlmoe_core::rng::stream;
use vlmoe_core::routing::{assign_bpr, assign_vanilla, compute_capacity, drop_stats, RoutingPlan};
use vlmoe_core::train::{train, TrainConfig};
use vlmoe_core::{Tape, Tensor};

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn accounting() -> Result<String> {
    let counts: Vec<usize> = [1, 4, 8, 16, 32]
        .iter()
        .map(|&experts| {
            MoMEConfig {
                experts,
                ..MoMEConfig::toy()
            }
            .param_counts()
            .applied_per_token
        })
        .collect();
    ensure!(
        counts.windows(2).all(|w| w[0] == w[1]),
        "per-token counts differ: {counts:?}"
    );
    Ok(format!(
        "{} parameters applied per token for every expert count",
        counts[0]
    ))
}

fn gradients() -> Result<String> {
    let mut rng = stream(11, &[]);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 0.5, &mut rng);
    let r = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let f = |x: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .matmul(tape.constant(w.clone()))?
            .gelu();
        Ok(y.mul(tape.constant(r.clone()))?.sum().item())
    };
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let y = leaf.matmul(tape.constant(w.clone()))?.gelu();
    let analytic = tape
        .backward(y.mul(tape.constant(r.clone()))?.sum())?
        .wrt(leaf);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..x.numel() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[j] += h;
        down.data_mut()[j] -= h;
        let numeric = (f(&up)? - f(&down)?) / (2.0 * h);
        worst = worst.max((numeric - analytic.data()[j]).abs() / numeric.abs().max(1.0));
    }
    ensure!(worst < 1e-6, "finite-difference mismatch {worst:.2e}");
    Ok(format!(
        "matmul/gelu backward within {worst:.1e} of central differences"
    ))
}

fn check_plan(plan: &RoutingPlan, n: usize, k: usize, capacity: usize) -> Result<()> {
    let stats = drop_stats(plan);
    ensure!(stats.kept + stats.dropped == n * k, "assignments lost");
    ensure!(
        stats.kept_per_expert.iter().all(|&c| c <= capacity),
        "capacity {capacity} exceeded: {:?}",
        stats.kept_per_expert
    );
    Ok(())
}

fn routing() -> Result<String> {
    let mut rng = stream(12, &[]);
    for i in 0..200 {
        let (n, e, k) = (8 + i % 17, 2 + i % 5, 1 + i % 2);
        let gates = softmax_rows(&Tensor::randn(&[n, e], 1.5, &mut rng));
        let capacity = compute_capacity(n, e, k, 1.05);
        check_plan(&assign_vanilla(&gates, k, capacity)?, n, k, capacity)?;
        check_plan(&assign_bpr(&gates, k, capacity)?, n, k, capacity)?;
    }
    Ok("200 random plans respect capacity and conserve assignments".into())
}

fn simulator() -> Result<String> {
    let mut rng = stream(13, &[]);
    let (n, d, experts) = (24, 6, 4);
    let tokens = Tensor::randn(&[n, d], 1.0, &mut rng);
    let gates = softmax_rows(&Tensor::randn(&[n, experts], 1.0, &mut rng));
    let plan = assign_bpr(&gates, 1, compute_capacity(n, experts, 1, 1.0))?;
    let weights: Vec<ExpertWeights> = (0..experts)
        .map(|_| ExpertWeights {
            w1: Tensor::randn(&[d, 2 * d], 0.3, &mut rng),
            w2: Tensor::randn(&[2 * d, d], 0.3, &mut rng),
        })
        .collect();
    let single = WorkerTopology::contiguous(experts, 1)?;
    let (reference, trace) =
        simulate_layer(&tokens, &plan, &weights, &single, Execution::Sequential)?;
    ensure!(
        trace.cross_worker_transfers() == 0,
        "one worker should not transfer"
    );
    for workers in [2, 4] {
        let topo = WorkerTopology::contiguous(experts, workers)?;
        let (a, ta) = simulate_layer(&tokens, &plan, &weights, &topo, Execution::Sequential)?;
        let (b, tb) = simulate_layer(
            &tokens,
            &plan,
            &weights,
            &topo,
            Execution::Threaded(workers),
        )?;
        ensure!(
            a == b && ta == tb,
            "threaded run differs at {workers} workers"
        );
        ensure!(
            a.max_abs_diff(&reference) <= 1e-10,
            "outputs depend on the worker count"
        );
        ta.check_conservation()?;
    }
    Ok("outputs independent of worker count and threading".into())
}

fn training() -> Result<String> {
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 4,
        val_size: 4,
        eval_every: 0,
        routing_log_every: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = MoMEModel::new(MoMEConfig::toy(), cfg.seed)?;
    let report = train(&mut model, &cfg, &mut ())?;
    for r in &report.steps {
        let tasks = r.loss_mlm + r.loss_mim + r.loss_vlm;
        ensure!(
            r.loss_total.is_finite(),
            "step {} loss is not finite",
            r.step
        );
        ensure!(
            (r.loss_total - tasks - r.aux_weight * r.loss_aux).abs() <= 1e-10,
            "step {} total does not decompose",
            r.step
        );
    }
    check_conservation(&report.routing)?;
    Ok(format!(
        "3 toy steps, {} routing decisions conserved",
        report.routing.len()
    ))
}

pub fn selftest() -> Result<()> {
    type Check = fn() -> Result<String>;
    let checks: [(&str, Check); 5] = [
        ("accounting", accounting),
        ("gradients", gradients),
        ("routing", routing),
        ("simulator", simulator),
        ("training", training),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(msg) => println!("ok    {name}: {msg}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e:#}");
            }
        }
    }
    ensure!(failed == 0, "{failed} self-test checks failed");
    println!("selftest passed");
    Ok(())
}
