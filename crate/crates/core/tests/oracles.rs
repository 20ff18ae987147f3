//! Reference oracles for the expert layer: dense-mixture equivalence,
//! single-expert equivalence with the dense model, and a finite-difference
//! check of the full router + dispatch + combine + auxiliary loss path.

mod common;

use common::reference;
use vlmoe_core::model::Mode;

#[test]
fn full_top_k_with_unbounded_capacity_is_the_dense_mixture() {
    let gap = reference::dense_mixture_gap(20);
    assert!(gap < 1e-10, "{gap:e}");
}

#[test]
fn single_expert_model_equals_weight_copied_dense_model() {
    let (moe, dense) = reference::single_expert_pair();
    for mode in [Mode::TextOnly, Mode::ImageOnly, Mode::Pair] {
        // a single gate is exactly 1 with or without routing noise
        for training in [false, true] {
            let a = reference::hidden_of(&moe, mode, training);
            let b = reference::hidden_of(&dense, mode, training);
            let diff = a.max_abs_diff(&b);
            assert!(diff < 1e-10, "{mode:?} training={training}: {diff:e}");
        }
    }
}

#[test]
fn composite_moe_layer_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        worst = worst.max(reference::composite_check(seed, 1, true));
        worst = worst.max(reference::composite_check(seed, 2, false));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}
