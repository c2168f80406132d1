use serde::{Deserialize, Serialize};

use crate::anchors::{FeatureGrid, LaneGrid};
use crate::error::{Error, Result};

/// Convolutional feature extractor: `3×3` stages (each conv + bias + ReLU,
/// padding 1) followed by a `1×1` channel reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub reduced_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 160,
            input_width: 320,
            stage_channels: vec![8, 16, 32, 64],
            stage_strides: vec![2, 2, 2, 2],
            reduced_channels: 16,
        }
    }
}

pub const STAGE_KERNEL: usize = 3;

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config(
                "model.stage_strides",
                format!(
                    "need one stride per stage ({} channels, {} strides)",
                    self.stage_channels.len(),
                    self.stage_strides.len()
                ),
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("model.stage_channels", "channel counts must be positive"));
        }
        if self.stage_strides.contains(&0) {
            return Err(Error::config("model.stage_strides", "strides must be positive"));
        }
        if self.reduced_channels == 0 {
            return Err(Error::config("model.reduced_channels", "must be at least 1"));
        }
        let s = self.total_stride();
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % s != 0
            || self.input_width % s != 0
        {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "{}x{} is not divisible by the total stride {s}",
                    self.input_height, self.input_width
                ),
            ));
        }
        Ok(())
    }

    pub fn feature_grid(&self) -> FeatureGrid {
        let s = self.total_stride();
        FeatureGrid {
            height: self.input_height / s,
            width: self.input_width / s,
            stride: s,
        }
    }

    /// `(C_out, C_in, H_out, W_out)` of every convolution, reduction last.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let (mut c, mut h, mut w) = (3, self.input_height, self.input_width);
        let mut out = Vec::new();
        for (&co, &s) in self.stage_channels.iter().zip(&self.stage_strides) {
            h = (h + 2 - STAGE_KERNEL) / s + 1;
            w = (w + 2 - STAGE_KERNEL) / s + 1;
            out.push((co, c, STAGE_KERNEL, h, w));
            c = co;
        }
        out.push((self.reduced_channels, c, 1, h, w));
        out
    }

    /// Multiply-accumulates of one backbone pass.
    pub fn macs(&self) -> u64 {
        self.conv_shapes()
            .iter()
            .map(|&(co, ci, k, h, w)| (co * ci * k * k * h * w) as u64)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub n_pts: usize,
    /// Number of lane classes `K`; the classifier emits `K + 1` logits.
    pub num_classes: usize,
    pub use_attention: bool,
    /// One classifier/regressor pair per anchor border instead of a shared one.
    pub per_boundary_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            n_pts: 72,
            num_classes: 1,
            use_attention: true,
            per_boundary_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_pts < 2 {
            return Err(Error::config("model.n_pts", "need at least 2 points"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "need at least one lane class"));
        }
        Ok(())
    }

    pub fn lane_grid(&self) -> LaneGrid {
        LaneGrid {
            n_pts: self.n_pts,
            height: self.backbone.input_height,
            width: self.backbone.input_width,
        }
    }

    /// Length of a pooled anchor vector, `C_F · H_F`.
    pub fn pooled_len(&self) -> usize {
        self.backbone.reduced_channels * self.backbone.feature_grid().height
    }

    /// Analytic multiply-accumulates of one forward pass with `n_anchors`.
    pub fn macs(&self, n_anchors: usize) -> u64 {
        let d = self.pooled_len() as u64;
        let n = n_anchors as u64;
        let mut total = self.backbone.macs();
        if self.use_attention && n >= 2 {
            total += n * d * (n - 1); // attention logits
            total += n * n * d; // W · A_loc
        }
        total += n * 2 * d * (self.num_classes as u64 + 1);
        total += n * 2 * d * (self.n_pts as u64 + 1);
        total
    }
}
