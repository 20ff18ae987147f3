//! The MoME transformer: shared self-attention, modality-routed FFN and
//! expert-pool sublayers, VL-FFN fusion blocks, embeddings and heads.

mod config;

pub use config::{even_moe_layers, MoMEConfig, ParamCounts};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Var};
use crate::aux_loss::layer_aux_loss;
use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::routing::{
    assign_with, compute_capacity, dispatch_combine, gate, FeedForward, Priority, RouterParams,
    RoutingPlan,
};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const T_CLS: usize = 1;
pub const T_SEP: usize = 2;
pub const MASK: usize = 3;
/// First id available to ordinary words.
pub const FIRST_WORD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    TextCls,
    TextSep,
    ImageCls,
    Word,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ImageOnly,
    TextOnly,
    Pair,
}

/// Which FFN sublayer processed a token in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    TextFfn,
    ImageFfn,
    VlFfn,
    TextMoe,
    ImageMoe,
}

impl Pathway {
    /// The only modality allowed on this pathway, if restricted.
    pub fn modality(self) -> Option<Modality> {
        match self {
            Self::TextFfn | Self::TextMoe => Some(Modality::Text),
            Self::ImageFfn | Self::ImageMoe => Some(Modality::Image),
            Self::VlFfn => None,
        }
    }
}

/// Rows of embedded tokens from one or more sequences. Each segment is one
/// sample; attention never crosses segment boundaries.
#[derive(Debug, Clone)]
pub struct TokenBatch<'t> {
    pub embeddings: Var<'t>,
    pub modality: Vec<Modality>,
    pub kind: Vec<TokenKind>,
    pub position: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl<'t> TokenBatch<'t> {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn rows_of(&self, modality: Modality) -> Vec<usize> {
        rows_of(&self.modality, modality)
    }

    /// Joins two batches sample by sample: segment `i` of the result is
    /// segment `i` of `first` followed by segment `i` of `second`.
    pub fn interleave(tape: &'t Tape, first: Self, second: Self) -> Result<Self> {
        if first.segments.len() != second.segments.len() {
            return Err(contract(format!(
                "cannot pair {} samples with {}",
                first.segments.len(),
                second.segments.len()
            )));
        }
        let offset = first.len();
        let mut order = Vec::with_capacity(first.len() + second.len());
        let mut segments = Vec::with_capacity(first.segments.len());
        for (a, b) in first.segments.iter().zip(&second.segments) {
            segments.push(Segment {
                start: order.len(),
                len: a.len + b.len,
            });
            order.extend(a.start..a.start + a.len);
            order.extend((b.start..b.start + b.len).map(|i| offset + i));
        }
        let stacked = tape.concat(&[first.embeddings, second.embeddings])?;
        Ok(Self {
            embeddings: stacked.gather_rows(&order)?,
            modality: reorder(&order, &first.modality, &second.modality),
            kind: reorder(&order, &first.kind, &second.kind),
            position: reorder(&order, &first.position, &second.position),
            segments,
        })
    }
}

fn reorder<T: Copy>(order: &[usize], a: &[T], b: &[T]) -> Vec<T> {
    order
        .iter()
        .map(|&i| if i < a.len() { a[i] } else { b[i - a.len()] })
        .collect()
}

fn rows_of(tags: &[Modality], modality: Modality) -> Vec<usize> {
    tags.iter()
        .enumerate()
        .filter(|(_, &m)| m == modality)
        .map(|(i, _)| i)
        .collect()
}

/// Routing outcome of one expert pool in one block.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer: usize,
    pub modality: Modality,
    /// Batch row of every plan token, in plan order.
    pub rows: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    pub plan: RoutingPlan,
    /// Router logits before noise.
    pub clean_logits: Tensor,
    /// Unweighted balancing penalty of this pool.
    pub aux: f64,
}

pub struct ForwardOutput<'t> {
    /// Final-normed hidden states, `[n × D]`.
    pub hidden: Var<'t>,
    pub modality: Vec<Modality>,
    pub kind: Vec<TokenKind>,
    pub routing: Vec<LayerRouting>,
    /// `pathways[l - 1][row]` is the FFN sublayer used in block `l`.
    pub pathways: Vec<Vec<Pathway>>,
    pub aux_text: Vec<Var<'t>>,
    pub aux_image: Vec<Var<'t>>,
}

impl<'t> ForwardOutput<'t> {
    pub fn rows_of(&self, modality: Modality) -> Vec<usize> {
        rows_of(&self.modality, modality)
    }

    /// Checks that every routed token was handled by its own modality's
    /// sublayer in every block.
    pub fn check_isolation(&self) -> Result<()> {
        for (l, paths) in self.pathways.iter().enumerate() {
            for (row, p) in paths.iter().enumerate() {
                if p.modality().is_some_and(|m| m != self.modality[row]) {
                    return Err(contract(format!(
                        "block {} sent a {:?} token through {:?}",
                        l + 1,
                        self.modality[row],
                        p
                    )));
                }
            }
        }
        for r in &self.routing {
            if r.rows.iter().any(|&row| self.modality[row] != r.modality) {
                return Err(contract(format!(
                    "block {} {:?} pool received a foreign token",
                    r.layer, r.modality
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct MoeIds {
    router: ParamId,
    experts: Vec<FfnIds>,
}

#[derive(Debug, Clone)]
enum Sublayer {
    Dense(FfnIds),
    Experts(MoeIds),
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    text: Sublayer,
    image: Sublayer,
    vl: Option<FfnIds>,
}

#[derive(Debug, Clone)]
struct EmbedIds {
    word: ParamId,
    text_pos: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    image_cls: ParamId,
    image_mask: ParamId,
    image_pos: ParamId,
}

#[derive(Debug, Clone)]
struct HeadIds {
    final_ln: (ParamId, ParamId),
    text: (ParamId, ParamId),
    image: (ParamId, ParamId),
}

/// Model parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct MoMEModel {
    cfg: MoMEConfig,
    store: ParamStore,
    embed: EmbedIds,
    blocks: Vec<BlockIds>,
    heads: HeadIds,
}

struct Init<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    std: f64,
}

impl<R: Rng> Init<'_, R> {
    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = Tensor::trunc_normal(shape, self.std, self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
        (
            self.weight(format!("{prefix}.w"), &[d_in, d_out]),
            self.zeros(format!("{prefix}.b"), &[d_out]),
        )
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            self.zeros(format!("{prefix}.bias"), &[d]),
        )
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> FfnIds {
        FfnIds {
            w1: self.weight(format!("{prefix}.w1"), &[d, h]),
            w2: self.weight(format!("{prefix}.w2"), &[h, d]),
        }
    }

    fn sublayer(&mut self, prefix: &str, moe: bool, cfg: &MoMEConfig) -> Sublayer {
        let (d, h) = (cfg.hidden, cfg.ffn_hidden());
        if !moe {
            return Sublayer::Dense(self.ffn(&format!("{prefix}.ffn"), d, h));
        }
        let router = self.weight(format!("{prefix}.moe.router"), &[cfg.experts, d]);
        let experts = (0..cfg.experts)
            .map(|e| self.ffn(&format!("{prefix}.moe.experts.{e}"), d, h))
            .collect();
        Sublayer::Experts(MoeIds { router, experts })
    }
}

/// Splits `[H × W × C]` pixels into row-major `[N × P²C]` patch vectors.
pub fn patchify(pixels: &Tensor, patch: usize) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 3 || patch == 0 || !s[0].is_multiple_of(patch) || !s[1].is_multiple_of(patch) {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![patch, patch],
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gr, gc) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = pixels.data();
    let mut out = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                let row = (pr * patch + y) * w + pc * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(vec![gr * gc, dim], out)
}

impl MoMEModel {
    /// Builds a freshly initialized model.
    pub fn new(cfg: MoMEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[streams::INIT]);
        let mut init = Init {
            store: &mut store,
            rng: &mut r,
            std: cfg.init_std,
        };
        let d = cfg.hidden;
        let (patch_w, patch_b) = init.linear("embed.patch", cfg.patch_dim(), d);
        let embed = EmbedIds {
            word: init.weight("embed.word".into(), &[cfg.text_vocab, d]),
            text_pos: init.weight("embed.text_pos".into(), &[cfg.max_text_len, d]),
            patch_w,
            patch_b,
            image_cls: init.weight("embed.image_cls".into(), &[1, d]),
            image_mask: init.weight("embed.image_mask".into(), &[1, d]),
            image_pos: init.weight("embed.image_pos".into(), &[cfg.num_patches() + 1, d]),
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = format!("layers.{l}");
            blocks.push(BlockIds {
                ln1: init.norm(&format!("{p}.ln1"), d),
                q: init.linear(&format!("{p}.attn.q"), d, d),
                k: init.linear(&format!("{p}.attn.k"), d, d),
                v: init.linear(&format!("{p}.attn.v"), d, d),
                o: init.linear(&format!("{p}.attn.o"), d, d),
                ln2: init.norm(&format!("{p}.ln2"), d),
                text: init.sublayer(&format!("{p}.text"), cfg.text_moe_at(l), &cfg),
                image: init.sublayer(&format!("{p}.image"), cfg.image_moe_at(l), &cfg),
                vl: cfg
                    .is_fusion_layer(l)
                    .then(|| init.ffn(&format!("{p}.vl.ffn"), d, cfg.ffn_hidden())),
            });
        }
        let heads = HeadIds {
            final_ln: init.norm("final_ln", d),
            text: init.linear("head.text", d, cfg.text_vocab),
            image: init.linear("head.image", d, cfg.visual_vocab),
        };
        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &MoMEConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn p<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        tape.param(&self.store, id)
    }

    /// Embeds text sequences, wrapping each in `T_CLS ... T_SEP`.
    pub fn embed_text<'t>(&self, tape: &'t Tape, seqs: &[Vec<usize>]) -> Result<TokenBatch<'t>> {
        let mut ids = Vec::new();
        let mut position = Vec::new();
        let mut kind = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.len() + 2 > self.cfg.max_text_len {
                return Err(Error::Length {
                    len: seq.len(),
                    max: self.cfg.max_text_len - 2,
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.cfg.text_vocab) {
                return Err(Error::Index {
                    op: "embed_text",
                    index: bad,
                    bound: self.cfg.text_vocab,
                });
            }
            segments.push(Segment {
                start: ids.len(),
                len: seq.len() + 2,
            });
            ids.push(T_CLS);
            ids.extend_from_slice(seq);
            ids.push(T_SEP);
            position.extend(0..seq.len() + 2);
            kind.push(TokenKind::TextCls);
            kind.extend(std::iter::repeat_n(TokenKind::Word, seq.len()));
            kind.push(TokenKind::TextSep);
        }
        let words = self.p(tape, self.embed.word).gather_rows(&ids)?;
        let pos = self.p(tape, self.embed.text_pos).gather_rows(&position)?;
        Ok(TokenBatch {
            embeddings: words.add(pos)?,
            modality: vec![Modality::Text; ids.len()],
            kind,
            position,
            segments,
        })
    }

    /// Embeds images as `I_CLS` followed by their patches. Patches listed
    /// in `masked[i]` are replaced by the learned mask embedding; pass an
    /// empty slice for no masking.
    pub fn embed_image<'t>(
        &self,
        tape: &'t Tape,
        pixels: &[&Tensor],
        masked: &[Vec<usize>],
    ) -> Result<TokenBatch<'t>> {
        let cfg = &self.cfg;
        let expect = [cfg.image_size.0, cfg.image_size.1, cfg.channels];
        if !masked.is_empty() && masked.len() != pixels.len() {
            return Err(contract("one mask list per image is required"));
        }
        let n = cfg.num_patches();
        let b = pixels.len();
        let mut flat = Vec::with_capacity(b * n * cfg.patch_dim());
        for img in pixels {
            if img.shape() != expect {
                return Err(Error::Dimension {
                    op: "embed_image",
                    lhs: img.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            flat.extend_from_slice(patchify(img, cfg.patch)?.data());
        }
        let patches = tape.constant(Tensor::new(vec![b * n, cfg.patch_dim()], flat)?);
        let mut proj = patches
            .matmul(self.p(tape, self.embed.patch_w))?
            .add(self.p(tape, self.embed.patch_b))?;
        let mut is_masked = vec![0.0; b * n];
        for (i, m) in masked.iter().enumerate() {
            for &j in m {
                if j >= n {
                    return Err(Error::Index {
                        op: "embed_image",
                        index: j,
                        bound: n,
                    });
                }
                is_masked[i * n + j] = 1.0;
            }
        }
        if is_masked.iter().any(|&m| m > 0.0) {
            let keep = tape.constant(Tensor::vector(is_masked.iter().map(|m| 1.0 - m).collect()));
            let mask_rows = self
                .p(tape, self.embed.image_mask)
                .gather_rows(&vec![0; b * n])?
                .scale_rows(tape.constant(Tensor::vector(is_masked)))?;
            proj = proj.scale_rows(keep)?.add(mask_rows)?;
        }
        let cls = self
            .p(tape, self.embed.image_cls)
            .gather_rows(&vec![0; b])?;
        let stacked = tape.concat(&[cls, proj])?;
        let mut order = Vec::with_capacity(b * (n + 1));
        let mut segments = Vec::with_capacity(b);
        for i in 0..b {
            segments.push(Segment {
                start: order.len(),
                len: n + 1,
            });
            order.push(i);
            order.extend((0..n).map(|j| b + i * n + j));
        }
        let position: Vec<usize> = (0..b).flat_map(|_| 0..n + 1).collect();
        let pos = self.p(tape, self.embed.image_pos).gather_rows(&position)?;
        let kind = (0..b)
            .flat_map(|_| {
                std::iter::once(TokenKind::ImageCls).chain(std::iter::repeat_n(TokenKind::Patch, n))
            })
            .collect();
        Ok(TokenBatch {
            embeddings: stacked.gather_rows(&order)?.add(pos)?,
            modality: vec![Modality::Image; order.len()],
            kind,
            position,
            segments,
        })
    }

    /// Embeds image-text pairs as one joint sequence per pair, text first.
    pub fn embed_pairs<'t>(
        &self,
        tape: &'t Tape,
        texts: &[Vec<usize>],
        pixels: &[&Tensor],
        masked: &[Vec<usize>],
    ) -> Result<TokenBatch<'t>> {
        let text = self.embed_text(tape, texts)?;
        let image = self.embed_image(tape, pixels, masked)?;
        TokenBatch::interleave(tape, text, image)
    }

    fn ffn<'t>(&self, tape: &'t Tape, ids: &FfnIds) -> FeedForward<'t> {
        FeedForward {
            w1: self.p(tape, ids.w1),
            w2: self.p(tape, ids.w2),
        }
    }

    fn linear<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        (w, b): (ParamId, ParamId),
    ) -> Result<Var<'t>> {
        x.matmul(self.p(tape, w))?.add(self.p(tape, b))
    }

    fn norm<'t>(&self, tape: &'t Tape, x: Var<'t>, (g, b): (ParamId, ParamId)) -> Result<Var<'t>> {
        x.layernorm(self.p(tape, g), self.p(tape, b))
    }

    #[allow(clippy::too_many_arguments)]
    fn experts<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        h: Var<'t>,
        ids: &MoeIds,
        modality: Modality,
        layer: usize,
        rows: Vec<usize>,
        training: bool,
        rng: &mut R,
        out: &mut ForwardOutput<'t>,
    ) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let sigma = cfg.noise_sigma();
        let router = RouterParams::with_sigma(self.p(tape, ids.router), sigma)?;
        let g = gate(&router, h, training, rng)?;
        let capacity = compute_capacity(
            rows.len(),
            cfg.experts,
            cfg.top_k,
            cfg.capacity.factor(training),
        );
        let (priority, kind) = match modality {
            Modality::Text => (cfg.bpr_text, cfg.aux.text),
            Modality::Image => (cfg.bpr_image, cfg.aux.image),
        };
        let priority = if priority {
            Priority::GateWeight
        } else {
            Priority::Index
        };
        let plan = assign_with(&g.gates.value(), cfg.top_k, capacity, priority)?;
        let experts: Vec<_> = ids.experts.iter().map(|e| self.ffn(tape, e)).collect();
        let y = dispatch_combine(h, g.gates, &plan, &experts)?;
        let aux = layer_aux_loss(kind, &g, cfg.top_k, sigma)?;
        match modality {
            Modality::Text => out.aux_text.push(aux),
            Modality::Image => out.aux_image.push(aux),
        }
        out.routing.push(LayerRouting {
            layer,
            modality,
            kinds: rows.iter().map(|&r| out.kind[r]).collect(),
            rows,
            plan,
            clean_logits: g.clean_logits.value(),
            aux: aux.item(),
        });
        Ok(y)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        segments: &[Segment],
        layer: usize,
        mode: Mode,
        training: bool,
        rng: &mut R,
        out: &mut ForwardOutput<'t>,
    ) -> Result<Var<'t>> {
        let b = &self.blocks[layer - 1];
        let h = self.norm(tape, x, b.ln1)?;
        let q = self.linear(tape, h, b.q)?;
        let k = self.linear(tape, h, b.k)?;
        let v = self.linear(tape, h, b.v)?;
        let a = tape.attention(q, k, v, segments, self.cfg.heads)?;
        let x = x.add(self.linear(tape, a, b.o)?)?;
        let h = self.norm(tape, x, b.ln2)?;
        let n = out.modality.len();
        if let (Some(vl), Mode::Pair) = (&b.vl, mode) {
            out.pathways.push(vec![Pathway::VlFfn; n]);
            return x.add(self.ffn(tape, vl).forward(h)?);
        }
        let mut paths = vec![Pathway::TextFfn; n];
        let mut parts = Vec::with_capacity(2);
        let mut dest = Vec::with_capacity(n);
        for (modality, sub) in [(Modality::Text, &b.text), (Modality::Image, &b.image)] {
            let rows = out.rows_of(modality);
            if rows.is_empty() {
                continue;
            }
            let hs = if rows.len() == n {
                h
            } else {
                h.gather_rows(&rows)?
            };
            let path = match (modality, sub) {
                (Modality::Text, Sublayer::Dense(_)) => Pathway::TextFfn,
                (Modality::Text, Sublayer::Experts(_)) => Pathway::TextMoe,
                (Modality::Image, Sublayer::Dense(_)) => Pathway::ImageFfn,
                (Modality::Image, Sublayer::Experts(_)) => Pathway::ImageMoe,
            };
            for &r in &rows {
                paths[r] = path;
            }
            let y = match sub {
                Sublayer::Dense(ids) => self.ffn(tape, ids).forward(hs)?,
                Sublayer::Experts(ids) => self.experts(
                    tape,
                    hs,
                    ids,
                    modality,
                    layer,
                    rows.clone(),
                    training,
                    rng,
                    out,
                )?,
            };
            parts.push(y);
            dest.extend(rows);
        }
        out.pathways.push(paths);
        let y = match parts.as_slice() {
            [one] if dest.len() == n => *one,
            _ => tape.concat(&parts)?.scatter_rows(&dest, n)?,
        };
        x.add(y)
    }

    /// Runs every block and the final norm. Heads are applied separately
    /// through [`MoMEModel::text_logits`] and [`MoMEModel::image_logits`]
    /// so callers can restrict them to the rows they score.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        batch: TokenBatch<'t>,
        mode: Mode,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<'t>> {
        let wrong = match mode {
            Mode::TextOnly => batch.modality.contains(&Modality::Image),
            Mode::ImageOnly => batch.modality.contains(&Modality::Text),
            Mode::Pair => false,
        };
        if wrong {
            return Err(contract(format!("{mode:?} batch holds another modality")));
        }
        let mut out = ForwardOutput {
            hidden: batch.embeddings,
            modality: batch.modality,
            kind: batch.kind,
            routing: Vec::new(),
            pathways: Vec::with_capacity(self.cfg.layers),
            aux_text: Vec::new(),
            aux_image: Vec::new(),
        };
        let mut x = batch.embeddings;
        for layer in 1..=self.cfg.layers {
            x = self.block(
                tape,
                x,
                &batch.segments,
                layer,
                mode,
                training,
                rng,
                &mut out,
            )?;
        }
        out.hidden = self.norm(tape, x, self.heads.final_ln)?;
        Ok(out)
    }

    /// Text-vocabulary logits for the given rows of `hidden`.
    pub fn text_logits<'t>(
        &self,
        tape: &'t Tape,
        hidden: Var<'t>,
        rows: &[usize],
    ) -> Result<Var<'t>> {
        self.linear(tape, hidden.gather_rows(rows)?, self.heads.text)
    }

    /// Visual-vocabulary logits for the given rows of `hidden`.
    pub fn image_logits<'t>(
        &self,
        tape: &'t Tape,
        hidden: Var<'t>,
        rows: &[usize],
    ) -> Result<Var<'t>> {
        self.linear(tape, hidden.gather_rows(rows)?, self.heads.image)
    }

    /// Names of router and expert tensors.
    pub fn moe_param_names(&self) -> Vec<String> {
        self.store
            .ids()
            .map(|id| self.store.name(id))
            .filter(|n| n.contains(".moe."))
            .map(str::to_string)
            .collect()
    }
}

/// Marks every router and expert tensor as non-trainable. Returns how many
/// tensors were frozen.
pub fn freeze_moe(store: &mut ParamStore) -> usize {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.name(id).contains(".moe."))
        .collect();
    for &id in &ids {
        store.set_trainable(id, false);
    }
    ids.len()
}
