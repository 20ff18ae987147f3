//! Pretraining loop: one optimizer step over the three objectives, held-out
//! evaluation, and the per-step metrics rows.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::aux_loss::combine_aux;
use crate::data::{self, Sample, Split, View};
use crate::error::{Error, Result};
use crate::model::{LayerRouting, MoMEModel, Modality};
use crate::objectives::{loss_mim, loss_mlm, loss_vlm, MaskKey, MaskingConfig, TaskLoss};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::report::{routing_records, RoutingRecord};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Inputs for one step, one list per objective stream.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub text: Vec<Vec<usize>>,
    pub images: Vec<Tensor>,
    pub pairs: Vec<(Vec<usize>, Tensor)>,
}

impl Batch {
    /// Routes each sample to the stream named by its view.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut b = Self::default();
        for s in samples {
            match s.view {
                View::Text => b.text.push(s.caption.clone()),
                View::Image => b.images.push(s.pixels.clone()),
                View::Pair => b.pairs.push((s.caption.clone(), s.pixels.clone())),
            }
        }
        b
    }

    /// `per_stream` fresh training scenes for each objective.
    pub fn draw(seed: u64, step: u64, per_stream: usize) -> Self {
        let samples = data::generate(
            Split::Train,
            3 * per_stream,
            rng::mix(seed, &[streams::BATCH, step]),
        );
        Self::from_samples(&samples)
    }
}

/// Which objectives contribute to a run. A disabled objective's stream is
/// emptied, so its term drops out of the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveToggles {
    pub mlm: bool,
    pub mim: bool,
    pub vlm: bool,
}

impl Default for ObjectiveToggles {
    fn default() -> Self {
        Self {
            mlm: true,
            mim: true,
            vlm: true,
        }
    }
}

impl ObjectiveToggles {
    pub fn any(&self) -> bool {
        self.mlm || self.mim || self.vlm
    }

    pub fn apply(&self, batch: &mut Batch) {
        if !self.mlm {
            batch.text.clear();
        }
        if !self.mim {
            batch.images.clear();
        }
        if !self.vlm {
            batch.pairs.clear();
        }
    }
}

/// Kept and dropped assignment counts of one expert pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub kept_per_expert: Vec<usize>,
    pub dropped: usize,
    pub drop_rate: f64,
}

/// Pool key such as `text.2` or `image.4`.
pub fn pool_key(modality: Modality, layer: usize) -> String {
    let m = match modality {
        Modality::Text => "text",
        Modality::Image => "image",
    };
    format!("{m}.{layer}")
}

fn pool_stats<'a>(routing: impl Iterator<Item = &'a LayerRouting>) -> BTreeMap<String, PoolStats> {
    let mut out: BTreeMap<String, PoolStats> = BTreeMap::new();
    for r in routing {
        let s = crate::routing::drop_stats(&r.plan);
        let e = out.entry(pool_key(r.modality, r.layer)).or_default();
        if e.kept_per_expert.is_empty() {
            e.kept_per_expert = vec![0; s.kept_per_expert.len()];
        }
        for (a, b) in e.kept_per_expert.iter_mut().zip(&s.kept_per_expert) {
            *a += b;
        }
        e.dropped += s.dropped;
    }
    for e in out.values_mut() {
        let kept: usize = e.kept_per_expert.iter().sum();
        let total = kept + e.dropped;
        e.drop_rate = if total == 0 {
            0.0
        } else {
            e.dropped as f64 / total as f64
        };
    }
    out
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_mim: f64,
    pub loss_vlm: f64,
    /// Unweighted auxiliary loss; the total carries it times the weight.
    pub loss_aux: f64,
    pub aux_weight: f64,
    pub lr: f64,
    pub drop_rate_by_layer: BTreeMap<String, f64>,
    pub expert_load: BTreeMap<String, Vec<usize>>,
    pub wall_ms: f64,
}

/// Task losses on held-out data, without routing noise or aux terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_mim: f64,
    pub loss_vlm: f64,
    pub loss_vlm_text: f64,
    pub loss_vlm_image: f64,
    pub drop_rate_by_layer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mlm,
    Mim,
    Vlm,
}

/// Everything a step produced besides the parameter update.
pub struct StepOutcome {
    pub row: StepRow,
    pub routing: Vec<(Task, LayerRouting)>,
}

struct Objectives<'t> {
    mlm: Option<TaskLoss<'t>>,
    mim: Option<TaskLoss<'t>>,
    vlm: Option<TaskLoss<'t>>,
}

impl<'t> Objectives<'t> {
    fn evaluate(
        model: &MoMEModel,
        tape: &'t Tape,
        batch: &Batch,
        masking: &MaskingConfig,
        key: MaskKey,
        training: bool,
    ) -> Result<Self> {
        let noise = |task: u64| rng::stream(key.seed, &[key.step, streams::ROUTER_NOISE, task]);
        let mlm = (!batch.text.is_empty())
            .then(|| {
                loss_mlm(
                    model,
                    tape,
                    &batch.text,
                    masking,
                    key,
                    training,
                    &mut noise(0),
                )
            })
            .transpose()?;
        let images: Vec<&Tensor> = batch.images.iter().collect();
        let mim = (!images.is_empty())
            .then(|| loss_mim(model, tape, &images, masking, key, training, &mut noise(1)))
            .transpose()?;
        let texts: Vec<Vec<usize>> = batch.pairs.iter().map(|p| p.0.clone()).collect();
        let pair_images: Vec<&Tensor> = batch.pairs.iter().map(|p| &p.1).collect();
        let vlm = (!texts.is_empty())
            .then(|| {
                loss_vlm(
                    model,
                    tape,
                    &texts,
                    &pair_images,
                    masking,
                    key,
                    training,
                    &mut noise(2),
                )
            })
            .transpose()?;
        Ok(Self { mlm, mim, vlm })
    }

    fn tasks(&self) -> impl Iterator<Item = &TaskLoss<'t>> {
        [&self.mlm, &self.mim, &self.vlm].into_iter().flatten()
    }

    fn value(task: &Option<TaskLoss<'t>>) -> f64 {
        task.as_ref().map_or(0.0, |t| t.loss.item())
    }

    fn routing(&self) -> impl Iterator<Item = &LayerRouting> {
        self.tasks().flat_map(|t| t.output.routing.iter())
    }

    fn tagged_routing(&self) -> Vec<(Task, LayerRouting)> {
        [
            (Task::Mlm, &self.mlm),
            (Task::Mim, &self.mim),
            (Task::Vlm, &self.vlm),
        ]
        .into_iter()
        .filter_map(|(task, t)| t.as_ref().map(|t| (task, t)))
        .flat_map(|(task, t)| t.output.routing.iter().map(move |r| (task, r.clone())))
        .collect()
    }

    fn check_isolation(&self) -> Result<()> {
        self.tasks().try_for_each(|t| t.output.check_isolation())
    }
}

fn diagnose<'a>(
    step: usize,
    mut routing: impl Iterator<Item = &'a LayerRouting>,
    what: &str,
) -> Error {
    let bad = routing
        .find(|r| !r.clean_logits.is_finite())
        .map(|r| {
            format!(
                "{what}; router logits of {} are non-finite: {:?}",
                pool_key(r.modality, r.layer),
                &r.clean_logits.data()[..r.clean_logits.numel().min(16)]
            )
        })
        .unwrap_or_else(|| format!("{what}; all router logits finite"));
    Error::NonFinite { step, detail: bad }
}

/// Step options that are not model or optimizer state.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub seed: u64,
    pub step: usize,
    pub lr: f64,
    pub masking: MaskingConfig,
    pub record_wall_time: bool,
}

/// Runs the three objectives on one tape, backpropagates
/// `MLM + MIM + VLM + weight · aux` and applies one optimizer step.
pub fn pretrain_step(
    model: &mut MoMEModel,
    opt: &mut Adam,
    batch: &Batch,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    let started = Instant::now();
    let tape = Tape::new();
    let key = MaskKey {
        seed: ctx.seed,
        step: ctx.step as u64,
    };
    let obj = Objectives::evaluate(model, &tape, batch, &ctx.masking, key, true)?;
    obj.check_isolation()?;
    let mut aux_text = Vec::new();
    let mut aux_image = Vec::new();
    for t in obj.tasks() {
        aux_text.extend_from_slice(&t.output.aux_text);
        aux_image.extend_from_slice(&t.output.aux_image);
    }
    let aux = combine_aux(&tape, &aux_text, &aux_image)?;
    let weight = model.config().aux.weight;
    let mut total = aux.scale(weight);
    for t in obj.tasks() {
        total = total.add(t.loss)?;
    }
    let routing = obj.tagged_routing();
    let loss_total = total.item();
    if !loss_total.is_finite() {
        return Err(diagnose(
            ctx.step,
            obj.routing(),
            &format!("total loss {loss_total}"),
        ));
    }
    let grads = tape.backward(total)?;
    opt.step(model.store_mut(), &grads, ctx.lr);
    let pools = pool_stats(routing.iter().map(|(_, r)| r));
    let row = StepRow {
        step: ctx.step,
        loss_total,
        loss_mlm: Objectives::value(&obj.mlm),
        loss_mim: Objectives::value(&obj.mim),
        loss_vlm: Objectives::value(&obj.vlm),
        loss_aux: aux.item(),
        aux_weight: weight,
        lr: ctx.lr,
        drop_rate_by_layer: pools
            .iter()
            .map(|(k, v)| (k.clone(), v.drop_rate))
            .collect(),
        expert_load: pools
            .into_iter()
            .map(|(k, v)| (k, v.kept_per_expert))
            .collect(),
        wall_ms: if ctx.record_wall_time {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    };
    Ok(StepOutcome { row, routing })
}

/// Held-out evaluation in inference mode. Masks are drawn from a fixed
/// stream so every evaluation of a run scores the same positions.
pub fn evaluate(
    model: &MoMEModel,
    batch: &Batch,
    seed: u64,
    step: usize,
    masking: &MaskingConfig,
) -> Result<EvalRow> {
    let tape = Tape::new();
    let key = MaskKey {
        seed,
        step: u64::MAX,
    };
    let obj = Objectives::evaluate(model, &tape, batch, masking, key, false)?;
    let (mlm, mim, vlm) = (
        Objectives::value(&obj.mlm),
        Objectives::value(&obj.mim),
        Objectives::value(&obj.vlm),
    );
    let vlm_text = obj
        .vlm
        .as_ref()
        .and_then(|t| t.text)
        .map_or(0.0, |v| v.item());
    let vlm_image = obj
        .vlm
        .as_ref()
        .and_then(|t| t.image)
        .map_or(0.0, |v| v.item());
    let pools = pool_stats(obj.routing());
    Ok(EvalRow {
        step,
        loss_total: mlm + mim + vlm,
        loss_mlm: mlm,
        loss_mim: mim,
        loss_vlm: vlm,
        loss_vlm_text: vlm_text,
        loss_vlm_image: vlm_image,
        drop_rate_by_layer: pools.into_iter().map(|(k, v)| (k, v.drop_rate)).collect(),
    })
}

/// Settings of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per objective stream per step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub masking: MaskingConfig,
    pub objectives: ObjectiveToggles,
    /// Held-out scenes per objective stream.
    pub val_size: usize,
    /// Evaluate every this many steps (and always at the start and end);
    /// 0 evaluates only at the start and end.
    pub eval_every: usize,
    /// Record routing decisions every this many steps; 0 disables.
    pub routing_log_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            seed: 1,
            optimizer: AdamConfig::default(),
            masking: MaskingConfig::default(),
            objectives: ObjectiveToggles::default(),
            val_size: 64,
            eval_every: 250,
            routing_log_every: 500,
            record_wall_time: false,
        }
    }
}

/// Everything a run reports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub routing: Vec<RoutingRecord>,
}

impl RunReport {
    pub fn first_eval(&self) -> Option<&EvalRow> {
        self.evals.first()
    }

    pub fn last_eval(&self) -> Option<&EvalRow> {
        self.evals.last()
    }
}

/// Observer hooks for long runs.
pub trait Progress {
    fn step(&mut self, _row: &StepRow) {}
    fn eval(&mut self, _row: &EvalRow) {}
}

impl Progress for () {}

/// Trains `model` in place for `cfg.steps` steps.
pub fn train(
    model: &mut MoMEModel,
    cfg: &TrainConfig,
    progress: &mut dyn Progress,
) -> Result<RunReport> {
    if cfg.batch_size == 0 || cfg.val_size == 0 {
        return Err(Error::Config(
            "batch and validation sizes must be positive".into(),
        ));
    }
    if !cfg.objectives.any() {
        return Err(Error::Config(
            "at least one objective must be enabled".into(),
        ));
    }
    let mut val = Batch::from_samples(&data::generate(Split::Val, 3 * cfg.val_size, cfg.seed));
    cfg.objectives.apply(&mut val);
    let schedule = LrSchedule::new(cfg.optimizer.peak_lr, cfg.optimizer.warmup_frac, cfg.steps);
    let mut opt = Adam::new(cfg.optimizer, model.store());
    let mut report = RunReport::default();
    let eval_at = |model: &MoMEModel,
                   step: usize,
                   report: &mut RunReport,
                   progress: &mut dyn Progress|
     -> Result<()> {
        let row = evaluate(model, &val, cfg.seed, step, &cfg.masking)?;
        progress.eval(&row);
        report.evals.push(row);
        Ok(())
    };
    eval_at(model, 0, &mut report, progress)?;
    for step in 0..cfg.steps {
        let mut batch = Batch::draw(cfg.seed, step as u64, cfg.batch_size);
        cfg.objectives.apply(&mut batch);
        let ctx = StepContext {
            seed: cfg.seed,
            step,
            lr: schedule.at(step),
            masking: cfg.masking,
            record_wall_time: cfg.record_wall_time,
        };
        let out = pretrain_step(model, &mut opt, &batch, &ctx)?;
        if cfg.routing_log_every > 0 && step % cfg.routing_log_every == 0 {
            report.routing.extend(routing_records(step, &out.routing));
        }
        progress.step(&out.row);
        report.steps.push(out.row);
        let done = step + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            eval_at(model, done, &mut report, progress)?;
        }
    }
    Ok(report)
}
