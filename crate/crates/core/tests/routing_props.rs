//! Capacity, conservation and batch-priority properties of token routing.

mod common;

use common::reference::{self, random_gates};
use proptest::prelude::*;
use vlmoe_core::routing::{
    assign_bpr, assign_vanilla, compute_capacity, drop_stats, top_k, RoutingPlan,
};
use vlmoe_core::Tensor;

fn check_plan(plan: &RoutingPlan, capacity: usize) {
    if let Some(v) = reference::plan_violation(plan, capacity) {
        panic!("{v}");
    }
}

#[test]
fn thousand_random_instances() {
    reference::routing_instances(1000, 77).unwrap();
}

#[test]
fn unbounded_capacity_keeps_everything() {
    let mut r = common::rng(5);
    for _ in 0..100 {
        let gates = random_gates(12, 4, &mut r);
        let plan = assign_vanilla(&gates, 2, 12).unwrap();
        assert_eq!(drop_stats(&plan).dropped, 0);
    }
}

#[test]
fn capacity_formula_values() {
    assert_eq!(compute_capacity(100, 4, 1, 1.05), 27);
    assert_eq!(compute_capacity(100, 4, 1, 1.0), 25);
    assert_eq!(compute_capacity(8, 4, 2, 1.0), 4);
    assert_eq!(compute_capacity(1, 32, 1, 1.0), 1);
}

#[test]
fn skewed_gates_drop_overflow_in_order() {
    // every token prefers expert 0, capacity 2
    let gates = Tensor::from_rows(&[
        vec![0.6, 0.4],
        vec![0.9, 0.1],
        vec![0.7, 0.3],
        vec![0.8, 0.2],
    ])
    .unwrap();
    let vanilla = assign_vanilla(&gates, 1, 2).unwrap();
    let kept: Vec<usize> = vanilla.expert_tokens(0);
    assert_eq!(kept, vec![0, 1]);
    let bpr = assign_bpr(&gates, 1, 2).unwrap();
    assert_eq!(bpr.expert_tokens(0), vec![1, 3]);
    assert!(bpr.kept_gate_mass() > vanilla.kept_gate_mass());
}

#[test]
fn bpr_k2_respects_priority_within_each_rank() {
    let mut r = common::rng(9);
    for _ in 0..300 {
        let gates = random_gates(20, 4, &mut r);
        let plan = assign_bpr(&gates, 2, 6).unwrap();
        check_plan(&plan, 6);
        let max_gate = |t: usize| gates.row(t).iter().copied().fold(f64::MIN, f64::max);
        // within a rank round, a dropped assignment never outranks a kept
        // one of the same expert and round
        for rank in 0..2 {
            for e in 0..4 {
                let round: Vec<_> = plan
                    .assignments
                    .iter()
                    .filter(|a| a.rank == rank && a.expert == e)
                    .collect();
                let lowest = round
                    .iter()
                    .filter(|a| a.kept)
                    .map(|a| max_gate(a.token))
                    .fold(f64::INFINITY, f64::min);
                assert!(round
                    .iter()
                    .filter(|a| !a.kept)
                    .all(|a| max_gate(a.token) <= lowest));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plans_are_deterministic_and_conserving(
        seed in any::<u64>(),
        n in 1usize..30,
        e in 1usize..6,
        cap in 1usize..12,
    ) {
        let mut r = common::rng(seed);
        let gates = random_gates(n, e, &mut r);
        let k = 1 + (seed as usize % e);
        let a = assign_bpr(&gates, k, cap).unwrap();
        let b = assign_bpr(&gates, k, cap).unwrap();
        prop_assert_eq!(&a, &b);
        check_plan(&a, cap);
        for t in 0..n {
            let chosen: Vec<usize> = a.assignments[t * k..(t + 1) * k].iter().map(|x| x.expert).collect();
            prop_assert_eq!(chosen, top_k(gates.row(t), k));
        }
    }

    #[test]
    fn drop_rate_in_unit_interval(seed in any::<u64>(), n in 1usize..30, cap in 1usize..8) {
        let gates = random_gates(n, 4, &mut common::rng(seed));
        let s = drop_stats(&assign_vanilla(&gates, 1, cap).unwrap());
        prop_assert!((0.0..=1.0).contains(&s.drop_rate));
        prop_assert!((s.drop_rate + s.success_rate - 1.0).abs() < 1e-15);
    }
}
