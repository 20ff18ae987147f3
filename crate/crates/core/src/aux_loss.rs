//! Router balancing penalties: importance, load, z-loss and their v-loss
//! average, plus the per-modality weighting into the training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::routing::GateOutput;
use crate::tensor::{normal_cdf, Tensor};

/// Guard on the mean in the load coefficient of variation.
pub const LOAD_MEAN_EPS: f64 = 1e-12;

/// Default weight of the auxiliary term in the total loss.
pub const DEFAULT_AUX_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxLossKind {
    Importance,
    Load,
    Zloss,
    Vloss,
}

impl AuxLossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Importance => "importance",
            Self::Load => "load",
            Self::Zloss => "zloss",
            Self::Vloss => "vloss",
        }
    }
}

impl std::str::FromStr for AuxLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(Self::Importance),
            "load" => Ok(Self::Load),
            "zloss" => Ok(Self::Zloss),
            "vloss" => Ok(Self::Vloss),
            other => Err(Error::Config(format!("unknown auxiliary loss {other}"))),
        }
    }
}

/// Which penalty each modality's MoE layers use, and the combination weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub text: AuxLossKind,
    pub image: AuxLossKind,
    pub weight: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            text: AuxLossKind::Load,
            image: AuxLossKind::Vloss,
            weight: DEFAULT_AUX_WEIGHT,
        }
    }
}

/// `(std / (mean + eps))²` of a vector, with the population std.
fn cv_squared<'t>(v: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let mean = v.mean();
    let var = v.sub(mean)?.square().mean();
    var.div(mean.shift(eps).square())
}

/// Squared coefficient of variation of per-expert gate mass.
pub fn importance_loss<'t>(gates: Var<'t>) -> Result<Var<'t>> {
    let shape = gates.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(contract("importance loss needs at least one token"));
    }
    cv_squared(gates.sum_rows()?, 0.0)
}

/// Per-token `k`-th largest noisy logit.
fn kth_largest(noisy: &Tensor, k: usize) -> Result<Vec<f64>> {
    let e = noisy.last_dim();
    if k == 0 || k > e {
        return Err(contract(format!("top-k must be in 1..={e}, got {k}")));
    }
    Ok((0..noisy.rows())
        .map(|r| {
            let mut row = noisy.row(r).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[k - 1]
        })
        .collect())
}

/// Probability that each expert stays in the top-k when only its own noise
/// is resampled: `1 - Φ((η_k - clean_e) / σ)`, with `η_k` the k-th largest
/// realized noisy logit of the token (expert `e` included).
pub fn selection_probabilities(
    clean: &Tensor,
    noisy: &Tensor,
    k: usize,
    sigma: f64,
) -> Result<Tensor> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(contract("load loss requires sigma > 0"));
    }
    if clean.shape() != noisy.shape() {
        return Err(Error::Dimension {
            op: "selection_probabilities",
            lhs: clean.shape().to_vec(),
            rhs: noisy.shape().to_vec(),
        });
    }
    let eta = kth_largest(noisy, k)?;
    let e = clean.last_dim();
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &c)| normal_cdf((c - eta[i / e]) / sigma))
        .collect();
    Tensor::new(clean.shape().to_vec(), data)
}

/// Squared coefficient of variation of the expected per-expert load.
/// The threshold `η_k` is read from `noisy` and treated as a constant.
pub fn load_loss<'t>(clean: Var<'t>, noisy: &Tensor, k: usize, sigma: f64) -> Result<Var<'t>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(contract("load loss requires sigma > 0"));
    }
    let shape = clean.shape();
    if shape.len() != 2 || shape != noisy.shape() {
        return Err(Error::Dimension {
            op: "load_loss",
            lhs: shape,
            rhs: noisy.shape().to_vec(),
        });
    }
    if shape[0] == 0 {
        return Err(contract("load loss needs at least one token"));
    }
    let eta = kth_largest(noisy, k)?;
    let e = shape[1];
    let offset: Vec<f64> = (0..noisy.numel()).map(|i| -eta[i / e] / sigma).collect();
    let offset = clean.tape().constant(Tensor::new(shape, offset)?);
    // 1 - Φ(z) = Φ(-z)
    let p = clean.scale(1.0 / sigma).add(offset)?.normal_cdf();
    cv_squared(p.sum_rows()?, LOAD_MEAN_EPS)
}

/// Mean squared log-sum-exp of router logits.
pub fn z_loss<'t>(clean: Var<'t>) -> Result<Var<'t>> {
    let shape = clean.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(contract("z-loss needs at least one token"));
    }
    Ok(clean.logsumexp_rows()?.square().mean())
}

/// Average of the importance and load losses.
pub fn v_loss<'t>(
    gates: Var<'t>,
    clean: Var<'t>,
    noisy: &Tensor,
    k: usize,
    sigma: f64,
) -> Result<Var<'t>> {
    let imp = importance_loss(gates)?;
    let load = load_loss(clean, noisy, k, sigma)?;
    Ok(imp.add(load)?.scale(0.5))
}

/// Evaluates the configured penalty for one MoE layer.
pub fn layer_aux_loss<'t>(
    kind: AuxLossKind,
    gate: &GateOutput<'t>,
    k: usize,
    sigma: f64,
) -> Result<Var<'t>> {
    match kind {
        AuxLossKind::Importance => importance_loss(gate.gates),
        AuxLossKind::Load => load_loss(gate.clean_logits, &gate.noisy_logits.value(), k, sigma),
        AuxLossKind::Zloss => z_loss(gate.clean_logits),
        AuxLossKind::Vloss => v_loss(
            gate.gates,
            gate.clean_logits,
            &gate.noisy_logits.value(),
            k,
            sigma,
        ),
    }
}

/// Unweighted auxiliary total: the mean over each modality's MoE layer
/// losses, summed over modalities. Zero when there are no MoE layers.
pub fn combine_aux<'t>(tape: &'t Tape, text: &[Var<'t>], image: &[Var<'t>]) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for layers in [text, image] {
        if layers.is_empty() {
            continue;
        }
        let mut acc = layers[0];
        for &l in &layers[1..] {
            acc = acc.add(l)?;
        }
        terms.push(acc.scale(1.0 / layers.len() as f64));
    }
    Ok(match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(0.0)),
        [one] => *one,
        [a, b] => a.add(*b)?,
        _ => unreachable!(),
    })
}

/// Weighted auxiliary contribution to the training objective.
pub fn total_aux<'t>(
    tape: &'t Tape,
    text: &[Var<'t>],
    image: &[Var<'t>],
    weight: f64,
) -> Result<Var<'t>> {
    Ok(combine_aux(tape, text, image)?.scale(weight))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn importance_of_uniform_gates_is_zero() {
        let tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[5, 4], 0.25));
        assert_eq!(importance_loss(g).unwrap().item(), 0.0);
    }

    #[test]
    fn importance_hand_instance() {
        let tape = Tape::new();
        let g = tape.leaf(mat(&[&[1.0, 0.0], &[1.0, 0.0]]));
        assert!((importance_loss(g).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn importance_is_permutation_invariant() {
        let tape = Tape::new();
        let a = tape.leaf(mat(&[&[0.7, 0.2, 0.1], &[0.1, 0.3, 0.6]]));
        let b = tape.leaf(mat(&[&[0.1, 0.7, 0.2], &[0.6, 0.1, 0.3]]));
        let la = importance_loss(a).unwrap().item();
        let lb = importance_loss(b).unwrap().item();
        assert!((la - lb).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let tape = Tape::new();
        let g = tape.leaf(Tensor::zeros(&[0, 3]));
        assert!(importance_loss(g).is_err());
    }

    #[test]
    fn selection_probability_reference_values() {
        let clean = mat(&[&[1.0, 0.0]]);
        let p = selection_probabilities(&clean, &clean, 1, 0.5).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.022_750_131_948_179_2).abs() < 1e-12);
    }

    #[test]
    fn load_loss_needs_positive_sigma() {
        let tape = Tape::new();
        let c = tape.leaf(mat(&[&[1.0, 0.0]]));
        assert!(load_loss(c, &mat(&[&[1.0, 0.0]]), 1, 0.0).is_err());
    }

    #[test]
    fn equal_logits_give_zero_load_loss() {
        let tape = Tape::new();
        let logits = Tensor::full(&[3, 4], 0.4);
        let c = tape.leaf(logits.clone());
        assert!(load_loss(c, &logits, 1, 0.25).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn z_loss_values() {
        let tape = Tape::new();
        let one = tape.leaf(mat(&[&[0.0]]));
        assert_eq!(z_loss(one).unwrap().item(), 0.0);
        let two = tape.leaf(mat(&[&[0.0, 0.0]]));
        let ln2 = std::f64::consts::LN_2;
        assert!((z_loss(two).unwrap().item() - ln2 * ln2).abs() < 1e-12);
        let shifted = tape.leaf(mat(&[&[3.0, 3.0]]));
        assert!((z_loss(shifted).unwrap().item() - (ln2 + 3.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn v_loss_is_mean_of_parts() {
        let tape = Tape::new();
        let clean_t = mat(&[&[0.3, -0.2, 0.9], &[1.1, 0.0, -0.4]]);
        let noisy_t = mat(&[&[0.35, -0.1, 0.8], &[1.0, 0.2, -0.5]]);
        let clean = tape.leaf(clean_t);
        let gates = tape.constant(noisy_t.clone()).softmax();
        let v = v_loss(gates, clean, &noisy_t, 1, 1.0 / 3.0).unwrap().item();
        let i = importance_loss(gates).unwrap().item();
        let l = load_loss(clean, &noisy_t, 1, 1.0 / 3.0).unwrap().item();
        assert!((v - 0.5 * (i + l)).abs() < 1e-12);
    }

    #[test]
    fn aux_combination() {
        let tape = Tape::new();
        assert_eq!(total_aux(&tape, &[], &[], 0.01).unwrap().item(), 0.0);
        let one = tape.constant(Tensor::scalar(1.0));
        assert!((total_aux(&tape, &[one], &[], 0.01).unwrap().item() - 0.01).abs() < 1e-15);
        let a = tape.constant(Tensor::scalar(0.2));
        let b = tape.constant(Tensor::scalar(0.4));
        let t = total_aux(&tape, &[], &[a, b], 0.01).unwrap().item();
        assert!((t - 0.01 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            AuxLossKind::Importance,
            AuxLossKind::Load,
            AuxLossKind::Zloss,
            AuxLossKind::Vloss,
        ] {
            assert_eq!(k.name().parse::<AuxLossKind>().unwrap(), k);
        }
        assert!("entropy".parse::<AuxLossKind>().is_err());
    }
}
