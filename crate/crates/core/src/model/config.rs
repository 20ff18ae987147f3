//! Model hyperparameters, presets and analytic parameter accounting.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aux_loss::AuxConfig;
use crate::error::{Error, Result};
use crate::routing::CapacityPolicy;

/// Hyperparameters of the MoME transformer. Layer indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoMEConfig {
    /// Total number of blocks `L`.
    pub layers: usize,
    /// Number of trailing blocks `F` that carry a VL-FFN.
    pub fusion_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Experts per modality pool.
    pub experts: usize,
    pub top_k: usize,
    pub capacity: CapacityPolicy,
    /// Blocks whose modality FFNs may be replaced by expert pools.
    pub moe_layers: BTreeSet<usize>,
    pub scale_text: bool,
    pub scale_image: bool,
    pub patch: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub channels: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub max_text_len: usize,
    /// FFN inner width as a multiple of `hidden`.
    pub ffn_mult: usize,
    /// Standard deviation of the truncated-normal initializer.
    pub init_std: f64,
    pub aux: AuxConfig,
    pub bpr_text: bool,
    pub bpr_image: bool,
    /// Router noise scale; `None` means `1 / experts`.
    pub router_noise: Option<f64>,
}

/// Even block indices up to `layers - fusion_layers`.
pub fn even_moe_layers(layers: usize, fusion_layers: usize) -> BTreeSet<usize> {
    (1..=layers.saturating_sub(fusion_layers))
        .filter(|l| l % 2 == 0)
        .collect()
}

impl MoMEConfig {
    /// Four-block model on 16×16 images used for the desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            fusion_layers: 1,
            hidden: 64,
            heads: 4,
            experts: 4,
            top_k: 1,
            capacity: CapacityPolicy::default(),
            moe_layers: even_moe_layers(4, 1),
            scale_text: true,
            scale_image: true,
            patch: 4,
            image_size: (16, 16),
            channels: 3,
            text_vocab: 256,
            visual_vocab: 16,
            max_text_len: 32,
            ffn_mult: 4,
            init_std: 0.02,
            aux: AuxConfig::default(),
            bpr_text: false,
            bpr_image: true,
            router_noise: None,
        }
    }

    pub fn base() -> Self {
        Self {
            layers: 12,
            fusion_layers: 3,
            hidden: 768,
            heads: 12,
            experts: 32,
            moe_layers: even_moe_layers(12, 3),
            patch: 16,
            image_size: (224, 224),
            text_vocab: 64_000,
            visual_vocab: 8192,
            max_text_len: 64,
            ..Self::toy()
        }
    }

    pub fn small() -> Self {
        Self {
            layers: 8,
            fusion_layers: 1,
            hidden: 384,
            heads: 6,
            moe_layers: even_moe_layers(8, 1),
            ..Self::base()
        }
    }

    /// Same backbone with every expert pool replaced by a dense FFN.
    pub fn dense(&self) -> Self {
        Self {
            scale_text: false,
            scale_image: false,
            ..self.clone()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.fusion_layers >= self.layers {
            return fail(format!(
                "fusion layers {} must be below total layers {}",
                self.fusion_layers, self.layers
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!(
                "top-k {} must be in 1..={}",
                self.top_k, self.experts
            ));
        }
        if let Some(&l) = self
            .moe_layers
            .iter()
            .find(|&&l| l == 0 || l > self.layers - self.fusion_layers)
        {
            return fail(format!(
                "MoE layer {l} outside 1..={}",
                self.layers - self.fusion_layers
            ));
        }
        if self.patch == 0
            || !self.image_size.0.is_multiple_of(self.patch)
            || !self.image_size.1.is_multiple_of(self.patch)
        {
            return fail(format!(
                "image {:?} is not divisible into {}-pixel patches",
                self.image_size, self.patch
            ));
        }
        if self.text_vocab <= crate::model::FIRST_WORD || self.visual_vocab == 0 {
            return fail("vocabularies too small".into());
        }
        if self.max_text_len < 2 || self.ffn_mult == 0 || self.channels == 0 {
            return fail("degenerate sequence or FFN width".into());
        }
        if self.init_std.is_nan()
            || self.init_std <= 0.0
            || self.aux.weight.is_nan()
            || self.aux.weight < 0.0
        {
            return fail("init std must be positive and aux weight nonnegative".into());
        }
        if let Some(s) = self.router_noise {
            if s.is_nan() || s <= 0.0 {
                return fail(format!("router noise {s} must be positive"));
            }
        }
        self.capacity.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch,
            self.image_size.1 / self.patch,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn noise_sigma(&self) -> f64 {
        self.router_noise.unwrap_or(1.0 / self.experts as f64)
    }

    pub fn is_fusion_layer(&self, layer: usize) -> bool {
        layer > self.layers - self.fusion_layers
    }

    pub fn text_moe_at(&self, layer: usize) -> bool {
        self.scale_text && self.moe_layers.contains(&layer)
    }

    pub fn image_moe_at(&self, layer: usize) -> bool {
        self.scale_image && self.moe_layers.contains(&layer)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let d = self.hidden;
        let ffn = 2 * d * self.ffn_hidden();
        let attn = 4 * d * d + 4 * d;
        let norms = 2 * 2 * d;
        let router = self.experts * d;
        let mut c = ParamCounts {
            embeddings: self.text_vocab * d
                + self.max_text_len * d
                + self.patch_dim() * d
                + d
                + 2 * d
                + (self.num_patches() + 1) * d,
            heads: 2 * d
                + d * self.text_vocab
                + self.text_vocab
                + d * self.visual_vocab
                + self.visual_vocab,
            ..ParamCounts::default()
        };
        let mut applied = 2 * d;
        for l in 1..=self.layers {
            c.backbone += attn + norms;
            applied += attn + norms;
            let mut applied_ffn = 0;
            for moe in [self.text_moe_at(l), self.image_moe_at(l)] {
                if moe {
                    c.backbone += self.experts * ffn;
                    c.routers += router;
                    applied_ffn = applied_ffn.max(self.top_k * ffn);
                } else {
                    c.backbone += ffn;
                    applied_ffn = applied_ffn.max(ffn);
                }
            }
            if self.is_fusion_layer(l) {
                c.backbone += ffn;
            }
            applied += applied_ffn;
        }
        c.applied_per_token = applied;
        c.total = c.embeddings + c.backbone + c.routers + c.heads;
        c
    }
}

impl Default for MoMEConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Parameter accounting. `applied_per_token` counts what the transformer
/// blocks and final norm apply to a single token: attention, norms and
/// `top_k` experts per FFN sublayer. Embedding lookups, output heads and
/// router matrices are excluded from it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub embeddings: usize,
    pub backbone: usize,
    pub routers: usize,
    pub heads: usize,
    pub applied_per_token: usize,
}
