//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod ops;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlmoe_core::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, h: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work);
            work[i].data_mut()[j] = orig - h;
            let down = f(&work);
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[i].shape().to_vec(), g).unwrap());
    }
    out
}

/// Builds `f` on a fresh tape with the inputs as differentiable leaves and
/// compares tape gradients with central differences. Returns the worst
/// relative error over the inputs.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &leaves);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let numeric = numeric_grads(inputs, &eval, FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Scalar projection `Σ out ⊙ R` with a fixed pseudo-random `R`, so that
/// gradient checks exercise every output element with distinct weights.
pub fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Var<'t> {
    let shape = out.shape();
    let r = uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x9e37_79b9));
    out.mul(tape.constant(r)).unwrap().sum()
}
