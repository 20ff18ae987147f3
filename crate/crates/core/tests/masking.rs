//! Statistics of the text and block-wise image masking procedures.

mod common;

use proptest::prelude::*;
use vlmoe_core::model::{T_CLS, T_SEP};
use vlmoe_core::objectives::{mask_image_blockwise, mask_text, MaskPlan};
use vlmoe_core::rng::stream;

#[test]
fn text_masking_rates() {
    let (rate, share) = common::reference::text_mask_stats(42);
    assert!((rate - 0.15).abs() <= 0.01, "masked fraction {rate}");
    for (got, want) in share.iter().zip([0.8, 0.1, 0.1]) {
        assert!((got - want).abs() <= 0.02, "replacement shares {share:?}");
    }
}

#[test]
fn special_tokens_are_never_masked() {
    let ids = vec![T_CLS, 10, 11, 12, 13, T_SEP];
    for seed in 0..200 {
        let (plan, corrupted) = mask_text(&ids, 0.5, 64, &mut stream(seed, &[])).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.positions.iter().all(|&p| (1..=4).contains(&p)));
        assert_eq!((corrupted[0], corrupted[5]), (T_CLS, T_SEP));
    }
}

fn union_of_blocks(plan: &MaskPlan, rows: usize, cols: usize) -> Vec<usize> {
    let mut cover = vec![false; rows * cols];
    for b in &plan.blocks {
        assert!(b.top + b.height <= rows && b.left + b.width <= cols);
        for (r, c) in b.cells() {
            cover[r * cols + c] = true;
        }
    }
    (0..rows * cols).filter(|&i| cover[i]).collect()
}

#[test]
fn blockwise_masking_on_14_by_14() {
    let mut rng = stream(7, &[]);
    let mut total = 0.0;
    for _ in 0..1000 {
        let plan = mask_image_blockwise(14, 14, 0.4, &mut rng).unwrap();
        assert_eq!(union_of_blocks(&plan, 14, 14), plan.positions);
        assert!(
            plan.len() >= 79 && plan.len() <= 98,
            "{} masked",
            plan.len()
        );
        total += plan.len() as f64 / 196.0;
    }
    let mean = total / 1000.0;
    assert!((0.40..=0.45).contains(&mean), "mean masked fraction {mean}");
}

#[test]
fn blockwise_masking_on_the_toy_grid() {
    let mut rng = stream(3, &[]);
    for _ in 0..500 {
        let plan = mask_image_blockwise(4, 4, 0.4, &mut rng).unwrap();
        assert_eq!(union_of_blocks(&plan, 4, 4), plan.positions);
        assert!((7..=8).contains(&plan.len()));
    }
}

#[test]
fn invalid_ratios_are_rejected() {
    let mut rng = stream(1, &[]);
    assert!(mask_text(&[5, 6], 0.0, 64, &mut rng).is_err());
    assert!(mask_image_blockwise(4, 4, 1.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn block_masks_hit_their_target(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
        let plan = mask_image_blockwise(rows, cols, 0.4, &mut stream(seed, &[])).unwrap();
        let n = rows * cols;
        let target = ((0.4 * n as f64) - 1e-9).ceil().max(1.0) as usize;
        prop_assert!(plan.len() >= target.min(n));
        prop_assert_eq!(union_of_blocks(&plan, rows, cols), plan.positions.clone());
        let mut sorted = plan.positions.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), plan.len());
    }
}
