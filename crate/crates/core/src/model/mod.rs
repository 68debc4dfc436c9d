//! The displacement-field network.
//!
//! A patch embedding feeds a hierarchical windowed-attention encoder (or one
//! of two comparison encoders). A convolutional decoder climbs back up the
//! pyramid with skip connections, picks up two convolutional feature maps
//! computed straight from the input at full and half resolution, and ends in
//! a zero-initialized 3-channel head.

mod checkpoint;
mod gradcheck;
mod net;
mod params;

pub use checkpoint::{ArrayEntry, Checkpoint, CheckpointHeader, NamedArray, CHECKPOINT_MAGIC};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, GroupReport};
pub(crate) use net::gradient_prepared;
pub use net::{forward, forward_tape, gradient, patch_embed_indices, Forward, Stage};
pub use params::{param_specs, Init, ParamGroup, ParamSpec, Params};

use serde::{Deserialize, Serialize};

use crate::dataset::INPUT_CHANNELS;
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    SwinHierarchical,
    PlainViT,
    ConvPyramid,
}

impl EncoderKind {
    /// Short label used in comparison reports.
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::SwinHierarchical => "Swin",
            EncoderKind::PlainViT => "ViT",
            EncoderKind::ConvPyramid => "CNN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub patch_size: Dims,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: Dims,
    pub mlp_ratio: f64,
    pub encoder_kind: EncoderKind,
    pub dvf_channels: usize,
    /// Full-resolution input grid the parameters are built for.
    pub input_shape: Dims,
    /// Channel width of the full-resolution decoder level; coarser levels
    /// double it.
    pub dec_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            patch_size: [4, 4, 2],
            embed_dim: 96,
            depths: vec![2, 2, 4, 2],
            heads: vec![4, 4, 8, 8],
            window: [5, 5, 5],
            mlp_ratio: 4.0,
            encoder_kind: EncoderKind::SwinHierarchical,
            dvf_channels: 3,
            input_shape: [128, 128, 32],
            dec_base: 16,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 2],
            input_shape: [16, 16, 8],
            dec_base: 4,
            ..ModelConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn token_grid(&self) -> Dims {
        [0, 1, 2].map(|a| self.input_shape[a] / self.patch_size[a])
    }

    /// Token grid of every stage; each merge halves the axes (rounding up).
    pub fn stage_grids(&self) -> Vec<Dims> {
        let mut g = self.token_grid();
        let mut out = Vec::with_capacity(self.stages());
        for _ in 0..self.stages() {
            out.push(g);
            g = g.map(|v| v.div_ceil(2));
        }
        out
    }

    pub fn half_grid(&self) -> Dims {
        self.input_shape.map(|v| v.div_ceil(2))
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    /// Decoder width at pyramid level `s` (0 = finest stage).
    pub fn dec_width(&self, s: usize) -> usize {
        (4 * self.dec_base) << s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.in_channels != INPUT_CHANNELS {
            return bad(format!("in_channels must be {INPUT_CHANNELS}"));
        }
        if self.dvf_channels != 3 {
            return bad("dvf_channels must be 3".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.embed_dim == 0 || self.dec_base == 0 {
            return bad("embed_dim and dec_base must be positive".into());
        }
        if self.patch_size.contains(&0) || self.window.contains(&0) {
            return bad("patch_size and window must be positive".into());
        }
        for s in 0..self.stages() {
            if self.heads[s] == 0 || !self.stage_dim(s).is_multiple_of(self.heads[s]) {
                return bad(format!(
                    "stage {s}: dim {} not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                ));
            }
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad("mlp_ratio must be positive".into());
        }
        for a in 0..3 {
            if self.input_shape[a] == 0 || !self.input_shape[a].is_multiple_of(self.patch_size[a]) {
                return Err(Error::Shape(format!(
                    "input shape {:?} not divisible by patch size {:?}",
                    self.input_shape, self.patch_size
                )));
            }
        }
        Ok(())
    }
}
