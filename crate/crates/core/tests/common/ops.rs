//! Finite-difference cases for every differentiable tape operation.

use super::{grad_check, project, rng, uniform};
use rand_chacha::ChaCha8Rng;
use vlmoe_core::autodiff::Segment;
use vlmoe_core::{Tape, Tensor, Var};

pub const TRIALS: u64 = 20;

pub type Report = Vec<(&'static str, f64)>;

/// Records the worst relative error of `f` over seeded random inputs.
fn check_op<G, F>(out: &mut Report, name: &'static str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut r = rng(1000 + trial);
        let inputs = gen(&mut r);
        worst = worst.max(grad_check(&inputs, |t, v| project(t, f(t, v), trial)));
    }
    out.push((name, worst));
}

pub fn matmul_variants() -> Report {
    let mut out = Vec::new();
    check_op(
        &mut out,
        "matmul",
        |r| {
            vec![
                uniform(&[3, 4], -1.0, 1.0, r),
                uniform(&[4, 2], -1.0, 1.0, r),
            ]
        },
        |_, v| v[0].matmul(v[1]).unwrap(),
    );
    check_op(
        &mut out,
        "matmul_t",
        |r| {
            vec![
                uniform(&[3, 4], -1.0, 1.0, r),
                uniform(&[5, 4], -1.0, 1.0, r),
            ]
        },
        |_, v| v[0].matmul_t(v[1]).unwrap(),
    );
    check_op(
        &mut out,
        "matmul_tn",
        |r| {
            vec![
                uniform(&[4, 3], -1.0, 1.0, r),
                uniform(&[4, 2], -1.0, 1.0, r),
            ]
        },
        |_, v| v[0].matmul_ex(v[1], true, false).unwrap(),
    );
    check_op(
        &mut out,
        "matmul_tt",
        |r| {
            vec![
                uniform(&[4, 3], -1.0, 1.0, r),
                uniform(&[2, 4], -1.0, 1.0, r),
            ]
        },
        |_, v| v[0].matmul_ex(v[1], true, true).unwrap(),
    );
    out
}

pub fn elementwise_binary_with_broadcast() -> Report {
    let mut out = Vec::new();
    let same = |r: &mut ChaCha8Rng| {
        vec![
            uniform(&[3, 4], -1.0, 1.0, r),
            uniform(&[3, 4], 0.5, 2.0, r),
        ]
    };
    let row = |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4], 0.5, 2.0, r)];
    let scalar =
        |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[], 0.5, 2.0, r)];
    check_op(&mut out, "add", same, |_, v| v[0].add(v[1]).unwrap());
    check_op(&mut out, "sub", same, |_, v| v[0].sub(v[1]).unwrap());
    check_op(&mut out, "mul", same, |_, v| v[0].mul(v[1]).unwrap());
    check_op(&mut out, "div", same, |_, v| v[0].div(v[1]).unwrap());
    check_op(&mut out, "add_row", row, |_, v| v[0].add(v[1]).unwrap());
    check_op(&mut out, "mul_row", row, |_, v| v[0].mul(v[1]).unwrap());
    check_op(&mut out, "div_row", row, |_, v| v[0].div(v[1]).unwrap());
    check_op(&mut out, "sub_scalar", scalar, |_, v| {
        v[0].sub(v[1]).unwrap()
    });
    check_op(&mut out, "div_scalar", scalar, |_, v| {
        v[0].div(v[1]).unwrap()
    });
    out
}

pub fn scale_shift_transpose_reshape() -> Report {
    let mut out = Vec::new();
    let one = |r: &mut ChaCha8Rng| vec![uniform(&[3, 5], -1.0, 1.0, r)];
    check_op(&mut out, "scale", one, |_, v| v[0].scale(-1.7));
    check_op(&mut out, "shift", one, |_, v| v[0].shift(0.3).square());
    check_op(&mut out, "transpose", one, |_, v| v[0].transpose().unwrap());
    check_op(&mut out, "reshape", one, |_, v| {
        v[0].reshape(&[5, 3]).unwrap()
    });
    out
}

pub fn row_selection_ops() -> Report {
    let mut out = Vec::new();
    let one = |r: &mut ChaCha8Rng| vec![uniform(&[5, 3], -1.0, 1.0, r)];
    check_op(&mut out, "embedding_gather", one, |_, v| {
        v[0].gather_rows(&[4, 0, 4, 2, 1, 4]).unwrap()
    });
    check_op(&mut out, "scatter_rows", one, |_, v| {
        v[0].scatter_rows(&[6, 1, 1, 0, 3], 7).unwrap()
    });
    check_op(&mut out, "slice_rows", one, |_, v| {
        v[0].slice_rows(1, 3).unwrap()
    });
    check_op(&mut out, "pick", one, |_, v| {
        v[0].pick(&[(0, 2), (4, 1), (0, 2), (3, 0)]).unwrap()
    });
    check_op(
        &mut out,
        "concat_split",
        |r| {
            vec![
                uniform(&[2, 3], -1.0, 1.0, r),
                uniform(&[4, 3], -1.0, 1.0, r),
            ]
        },
        |t, v| {
            let c = t.concat(&[v[0], v[1], v[0]]).unwrap();
            let parts = t.split(c, &[3, 5]).unwrap();
            parts[1].mul(parts[1]).unwrap()
        },
    );
    check_op(
        &mut out,
        "scale_rows",
        |r| vec![uniform(&[4, 3], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)],
        |_, v| v[0].scale_rows(v[1]).unwrap(),
    );
    out
}

pub fn reductions() -> Report {
    let mut out = Vec::new();
    let one = |r: &mut ChaCha8Rng| vec![uniform(&[4, 3], -1.0, 1.0, r)];
    check_op(&mut out, "sum", one, |_, v| v[0].square().sum());
    check_op(&mut out, "mean", one, |_, v| v[0].square().mean());
    check_op(&mut out, "sum_rows", one, |_, v| v[0].sum_rows().unwrap());
    check_op(&mut out, "logsumexp_rows", one, |_, v| {
        v[0].logsumexp_rows().unwrap()
    });
    out
}

pub fn unary_ops() -> Report {
    let mut out = Vec::new();
    let signed = |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], -3.0, 3.0, r)];
    let positive = |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], 0.2, 3.0, r)];
    check_op(&mut out, "sqrt", positive, |_, v| v[0].sqrt());
    check_op(&mut out, "ln", positive, |_, v| v[0].ln());
    check_op(&mut out, "sigmoid", signed, |_, v| v[0].sigmoid());
    check_op(&mut out, "gelu", signed, |_, v| v[0].gelu());
    check_op(&mut out, "normal_cdf", signed, |_, v| v[0].normal_cdf());
    check_op(&mut out, "square", signed, |_, v| v[0].square());
    check_op(&mut out, "exp", signed, |_, v| v[0].exp());
    check_op(&mut out, "softmax", signed, |_, v| v[0].softmax());
    out
}

pub fn gelu_at_half() -> f64 {
    grad_check(&[Tensor::vector(vec![0.5])], |_, v| v[0].gelu().sum())
}

pub fn layernorm_gradient() -> Report {
    let mut out = Vec::new();
    check_op(
        &mut out,
        "layernorm",
        |r| {
            vec![
                uniform(&[4, 8], -2.0, 2.0, r),
                uniform(&[8], 0.5, 1.5, r),
                uniform(&[8], -0.5, 0.5, r),
            ]
        },
        |_, v| v[0].layernorm(v[1], v[2]).unwrap(),
    );
    out
}

pub fn cross_entropy_gradient() -> Report {
    let mut out = Vec::new();
    check_op(
        &mut out,
        "cross_entropy",
        |r| vec![uniform(&[5, 6], -2.0, 2.0, r)],
        |_, v| {
            v[0].cross_entropy(&[1, 0, 5, 3, 3], &[false, true, false, false, true])
                .unwrap()
        },
    );
    out
}

pub fn attention_gradient() -> Report {
    let mut out = Vec::new();
    let segs = [
        Segment { start: 0, len: 3 },
        Segment { start: 3, len: 1 },
        Segment { start: 4, len: 4 },
    ];
    check_op(
        &mut out,
        "attention",
        |r| {
            vec![
                uniform(&[8, 6], -1.0, 1.0, r),
                uniform(&[8, 6], -1.0, 1.0, r),
                uniform(&[8, 6], -1.0, 1.0, r),
            ]
        },
        |t, v| t.attention(v[0], v[1], v[2], &segs, 2).unwrap(),
    );
    // shared q/k/v source exercises gradient accumulation into one node
    check_op(
        &mut out,
        "self_attention_shared",
        |r| vec![uniform(&[8, 6], -1.0, 1.0, r)],
        |t, v| t.attention(v[0], v[0], v[0], &segs, 3).unwrap(),
    );
    out
}

/// Every operation case, in a fixed order.
pub fn all() -> Report {
    [
        matmul_variants(),
        elementwise_binary_with_broadcast(),
        scale_shift_transpose_reshape(),
        row_selection_ops(),
        reductions(),
        unary_ops(),
        layernorm_gradient(),
        cross_entropy_gradient(),
        attention_gradient(),
    ]
    .concat()
}
