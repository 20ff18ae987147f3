//! Masked data modeling: text masking, block-wise image masking, the
//! intensity visual tokenizer and the MLM / MIM / VLM losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::model::{patchify, ForwardOutput, MoMEModel, Mode, FIRST_WORD, MASK};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// What happened to a masked position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    MaskToken,
    RandomToken,
    Keep,
    BlockMask,
}

/// Axis-aligned patch rectangle `[top, top + height) × [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    pub replacement: Vec<Replacement>,
    /// Original ids at the masked positions.
    pub targets: Vec<usize>,
    /// Rectangles whose union is the masked set (image plans only).
    pub blocks: Vec<Block>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Mask ratios of the three objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub text_ratio: f64,
    pub image_ratio: f64,
    pub pair_text_ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_ratio: 0.15,
            image_ratio: 0.4,
            pair_text_ratio: 0.5,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Masks `round(ratio · m)` of the `m` word positions of `ids` (ids below
/// [`FIRST_WORD`] are never chosen). Chosen positions become `MASK` with
/// probability 0.8, a uniform random word with probability 0.1, and stay
/// unchanged otherwise. Returns the plan and the corrupted sequence.
pub fn mask_text<R: Rng + ?Sized>(
    ids: &[usize],
    ratio: f64,
    vocab: usize,
    rng: &mut R,
) -> Result<(MaskPlan, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if vocab <= FIRST_WORD {
        return Err(contract("vocabulary has no word ids"));
    }
    let mut maskable: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= FIRST_WORD).collect();
    let count = round_half_up(ratio * maskable.len() as f64).min(maskable.len());
    for i in 0..count {
        let j = rng.random_range(i..maskable.len());
        maskable.swap(i, j);
    }
    let mut positions = maskable[..count].to_vec();
    positions.sort_unstable();
    let mut corrupted = ids.to_vec();
    let mut plan = MaskPlan {
        targets: positions.iter().map(|&p| ids[p]).collect(),
        ..MaskPlan::default()
    };
    for &p in &positions {
        let u: f64 = rng.random();
        let rep = if u < 0.8 {
            corrupted[p] = MASK;
            Replacement::MaskToken
        } else if u < 0.9 {
            corrupted[p] = rng.random_range(FIRST_WORD..vocab);
            Replacement::RandomToken
        } else {
            Replacement::Keep
        };
        plan.replacement.push(rep);
    }
    plan.positions = positions;
    Ok((plan, corrupted))
}

const MIN_BLOCK: usize = 4;
const MIN_ASPECT: f64 = 0.3;
const MAX_FAILED_TRIES: usize = 100;

/// Block-wise masking of a `rows × cols` patch grid. Rectangles of area at
/// least 4 with aspect ratio in `[0.3, 1/0.3]` are unioned until at least
/// `ceil(ratio · N)` patches are masked, never exceeding
/// `floor((ratio + 0.1) · N)`. Grids too small for such rectangles fall
/// back to single patches. Positions are row-major patch indices and
/// targets are left empty for the caller to fill.
pub fn mask_image_blockwise<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = rows * cols;
    let target = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let cap = (((ratio + 0.1) * n as f64) + 1e-9)
        .floor()
        .max(target as f64) as usize;
    let cap = cap.min(n);
    let target = target.min(cap);
    let mut masked = vec![false; n];
    let mut count = 0;
    let mut blocks = Vec::new();
    let mut failures = 0;
    while count < target && failures < MAX_FAILED_TRIES {
        let hi = (target - count).max(MIN_BLOCK);
        let area = rng.random_range(MIN_BLOCK as f64..=hi as f64);
        let log_aspect = rng.random_range(MIN_ASPECT.ln()..=(1.0 / MIN_ASPECT).ln());
        let aspect = log_aspect.exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        if h * w < MIN_BLOCK {
            failures += 1;
            continue;
        }
        let block = Block {
            top: rng.random_range(0..=rows - h),
            left: rng.random_range(0..=cols - w),
            height: h,
            width: w,
        };
        let fresh = block
            .cells()
            .filter(|&(r, c)| !masked[r * cols + c])
            .count();
        if fresh == 0 || count + fresh > cap {
            failures += 1;
            continue;
        }
        for (r, c) in block.cells() {
            masked[r * cols + c] = true;
        }
        count += fresh;
        blocks.push(block);
        failures = 0;
    }
    while count < target {
        let free: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
        let i = free[rng.random_range(0..free.len())];
        masked[i] = true;
        count += 1;
        blocks.push(Block {
            top: i / cols,
            left: i % cols,
            height: 1,
            width: 1,
        });
    }
    let positions: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    Ok(MaskPlan {
        replacement: vec![Replacement::BlockMask; positions.len()],
        positions,
        targets: Vec::new(),
        blocks,
    })
}

/// Quantizes each patch's mean intensity in `[0, 1]` into `vocab` bins.
pub fn visual_tokenize(pixels: &Tensor, patch: usize, vocab: usize) -> Result<Vec<usize>> {
    let patches = patchify(pixels, patch)?;
    Ok((0..patches.rows())
        .map(|i| {
            let row = patches.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            ((mean.clamp(0.0, 1.0) * vocab as f64).floor() as usize).min(vocab - 1)
        })
        .collect())
}

/// Image mask plan with targets filled from the visual tokenizer.
pub fn mask_image<R: Rng + ?Sized>(
    model: &MoMEModel,
    pixels: &Tensor,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let cfg = model.config();
    let (rows, cols) = cfg.grid();
    let mut plan = mask_image_blockwise(rows, cols, ratio, rng)?;
    let ids = visual_tokenize(pixels, cfg.patch, cfg.visual_vocab)?;
    plan.targets = plan.positions.iter().map(|&p| ids[p]).collect();
    Ok(plan)
}

/// Identifies one batch's masking draws: per-sample streams derive from
/// `(seed, step, stream, sample index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskKey {
    pub seed: u64,
    pub step: u64,
}

impl MaskKey {
    pub fn rng(&self, stream: u64, index: usize) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.seed, &[self.step, stream, index as u64])
    }
}

/// Value and bookkeeping of one objective evaluated on the tape.
pub struct TaskLoss<'t> {
    pub loss: Var<'t>,
    /// Text-side and image-side terms (VLM only carries both).
    pub text: Option<Var<'t>>,
    pub image: Option<Var<'t>>,
    pub masked: usize,
    pub output: ForwardOutput<'t>,
}

fn zero<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::scalar(0.0))
}

fn scored<'t>(
    tape: &'t Tape,
    logits: impl FnOnce(&[usize]) -> Result<Var<'t>>,
    rows: &[usize],
    targets: &[usize],
    what: &str,
) -> Result<Var<'t>> {
    if rows.is_empty() {
        log::warn!("{what}: batch has no masked positions, loss is zero");
        return Ok(zero(tape));
    }
    logits(rows)?.cross_entropy(targets, &vec![false; targets.len()])
}

/// Masked language modeling on text-only sequences.
pub fn loss_mlm<'t, R: Rng + ?Sized>(
    model: &MoMEModel,
    tape: &'t Tape,
    texts: &[Vec<usize>],
    masking: &MaskingConfig,
    key: MaskKey,
    training: bool,
    noise: &mut R,
) -> Result<TaskLoss<'t>> {
    let vocab = model.config().text_vocab;
    let mut corrupted = Vec::with_capacity(texts.len());
    let mut plans = Vec::with_capacity(texts.len());
    for (i, t) in texts.iter().enumerate() {
        let (plan, c) = mask_text(
            t,
            masking.text_ratio,
            vocab,
            &mut key.rng(streams::MASK_TEXT, i),
        )?;
        plans.push(plan);
        corrupted.push(c);
    }
    let batch = model.embed_text(tape, &corrupted)?;
    let (rows, targets) = masked_rows(batch.segments.iter().map(|s| s.start + 1), &plans);
    let output = model.forward(tape, batch, Mode::TextOnly, training, noise)?;
    let hidden = output.hidden;
    let loss = scored(
        tape,
        |r| model.text_logits(tape, hidden, r),
        &rows,
        &targets,
        "mlm",
    )?;
    Ok(TaskLoss {
        loss,
        text: Some(loss),
        image: None,
        masked: rows.len(),
        output,
    })
}

/// Masked image modeling on image-only sequences.
pub fn loss_mim<'t, R: Rng + ?Sized>(
    model: &MoMEModel,
    tape: &'t Tape,
    images: &[&Tensor],
    masking: &MaskingConfig,
    key: MaskKey,
    training: bool,
    noise: &mut R,
) -> Result<TaskLoss<'t>> {
    let plans = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            mask_image(
                model,
                img,
                masking.image_ratio,
                &mut key.rng(streams::MASK_IMAGE, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.positions.clone()).collect();
    let batch = model.embed_image(tape, images, &masked)?;
    let (rows, targets) = masked_rows(batch.segments.iter().map(|s| s.start + 1), &plans);
    let output = model.forward(tape, batch, Mode::ImageOnly, training, noise)?;
    let hidden = output.hidden;
    let loss = scored(
        tape,
        |r| model.image_logits(tape, hidden, r),
        &rows,
        &targets,
        "mim",
    )?;
    Ok(TaskLoss {
        loss,
        text: None,
        image: Some(loss),
        masked: rows.len(),
        output,
    })
}

/// Masked vision-language modeling on image-caption pairs in one joint
/// forward; the loss is the sum of its text-side and image-side terms.
#[allow(clippy::too_many_arguments)]
pub fn loss_vlm<'t, R: Rng + ?Sized>(
    model: &MoMEModel,
    tape: &'t Tape,
    texts: &[Vec<usize>],
    images: &[&Tensor],
    masking: &MaskingConfig,
    key: MaskKey,
    training: bool,
    noise: &mut R,
) -> Result<TaskLoss<'t>> {
    if texts.len() != images.len() {
        return Err(contract("every caption needs its image"));
    }
    let vocab = model.config().text_vocab;
    let mut corrupted = Vec::with_capacity(texts.len());
    let mut text_plans = Vec::with_capacity(texts.len());
    let mut image_plans = Vec::with_capacity(texts.len());
    for (i, (t, img)) in texts.iter().zip(images).enumerate() {
        let (plan, c) = mask_text(
            t,
            masking.pair_text_ratio,
            vocab,
            &mut key.rng(streams::MASK_PAIR_TEXT, i),
        )?;
        text_plans.push(plan);
        corrupted.push(c);
        image_plans.push(mask_image(
            model,
            img,
            masking.image_ratio,
            &mut key.rng(streams::MASK_PAIR_IMAGE, i),
        )?);
    }
    let masked: Vec<Vec<usize>> = image_plans.iter().map(|p| p.positions.clone()).collect();
    let batch = model.embed_pairs(tape, &corrupted, images, &masked)?;
    // each pair segment is [T_CLS words T_SEP][I_CLS patches]
    let (t_rows, t_targets) = masked_rows(batch.segments.iter().map(|s| s.start + 1), &text_plans);
    let (i_rows, i_targets) = masked_rows(
        batch
            .segments
            .iter()
            .zip(&corrupted)
            .map(|(s, c)| s.start + c.len() + 3),
        &image_plans,
    );
    let output = model.forward(tape, batch, Mode::Pair, training, noise)?;
    let hidden = output.hidden;
    let text = scored(
        tape,
        |r| model.text_logits(tape, hidden, r),
        &t_rows,
        &t_targets,
        "vlm text",
    )?;
    let image = scored(
        tape,
        |r| model.image_logits(tape, hidden, r),
        &i_rows,
        &i_targets,
        "vlm image",
    )?;
    Ok(TaskLoss {
        loss: text.add(image)?,
        text: Some(text),
        image: Some(image),
        masked: t_rows.len() + i_rows.len(),
        output,
    })
}

/// Batch rows and targets of masked positions, given the row holding each
/// sample's first maskable element.
fn masked_rows(first: impl Iterator<Item = usize>, plans: &[MaskPlan]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (start, plan) in first.zip(plans) {
        rows.extend(plan.positions.iter().map(|p| start + p));
        targets.extend_from_slice(&plan.targets);
    }
    (rows, targets)
}
