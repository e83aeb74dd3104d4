use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FusionMode;

/// Which network family a configuration describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Single-scale network with same-level forward and backward skips.
    Bionet,
    /// Multi-scale SuperNet with dense cross-level skips between stages.
    Bionetpp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Transpose,
    Bilinear,
}

/// Declarative description of a recurrent encoder-decoder.
///
/// Field names follow the topology file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: Family,
    /// Recurrence iterations.
    #[serde(rename = "T")]
    pub iterations: usize,
    /// Encoding depth.
    #[serde(rename = "L")]
    pub depth: usize,
    /// Channel expansion multiplier.
    #[serde(rename = "N_mult")]
    pub width_mult: f64,
    /// Backward skips counted from the deepest level.
    #[serde(rename = "W_back")]
    pub backward_skips: usize,
    pub base_width: usize,
    pub fusion: FusionMode,
    pub upsample: UpsampleMode,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// Concatenation, transpose upsampling and all backward skips.
    pub fn bionet(iterations: usize, depth: usize, base_width: usize) -> Self {
        ArchConfig {
            family: Family::Bionet,
            iterations,
            depth,
            width_mult: 1.0,
            backward_skips: depth,
            base_width,
            fusion: FusionMode::Concat,
            upsample: UpsampleMode::Transpose,
            in_channels: 3,
            num_classes: 2,
        }
    }

    /// SuperNet configuration; fusion and upsampling are fixed.
    pub fn bionet_pp(iterations: usize, depth: usize, base_width: usize) -> Self {
        ArchConfig {
            family: Family::Bionetpp,
            fusion: FusionMode::Average,
            upsample: UpsampleMode::Bilinear,
            ..Self::bionet(iterations, depth, base_width)
        }
    }

    pub fn with_classes(mut self, in_channels: usize, num_classes: usize) -> Self {
        self.in_channels = in_channels;
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations < 1 {
            return bad("T must be at least 1".into());
        }
        if self.depth < 1 {
            return bad("L must be at least 1".into());
        }
        if self.depth > 12 {
            return bad(format!("L = {} is unreasonably deep", self.depth));
        }
        if !(self.width_mult > 0.0) || !self.width_mult.is_finite() {
            return bad(format!("N_mult must be positive, got {}", self.width_mult));
        }
        if self.backward_skips > self.depth {
            return bad(format!("W_back = {} exceeds L = {}", self.backward_skips, self.depth));
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return bad("base_width and in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.family == Family::Bionetpp
            && (self.fusion != FusionMode::Average || self.upsample != UpsampleMode::Bilinear)
        {
            return bad("the multi-scale SuperNet requires average fusion and bilinear upsampling".into());
        }
        for l in 0..=self.depth {
            if self.width(l) == 0 {
                return bad(format!("level {l} rounds to zero channels"));
            }
        }
        Ok(())
    }

    /// Extraction stages, one encoder and one decoder per iteration.
    pub fn stages(&self) -> usize {
        2 * self.iterations
    }

    /// Searchable stage pairs.
    pub fn stage_pairs(&self) -> usize {
        2 * self.iterations - 1
    }

    /// Feature width at `level`.
    ///
    /// Single-scale networks double the width per level; the SuperNet keeps
    /// one width everywhere so that cross-level averaging needs no
    /// projection.
    pub fn width(&self, level: usize) -> usize {
        let base = self.base_width as f64 * self.width_mult;
        match self.family {
            Family::Bionet => (base * f64::powi(2.0, level as i32)).round() as usize,
            Family::Bionetpp => base.round() as usize,
        }
    }

    /// Same configuration with the channel multiplier scaled.
    pub fn scaled_width(&self, factor: f64) -> Self {
        ArchConfig {
            width_mult: self.width_mult * factor,
            ..self.clone()
        }
    }

    /// Checks that an input spatial size survives `L` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}×{w} is not divisible by 2^L = {m}"
            )));
        }
        Ok(())
    }

    pub fn is_encoder_stage(stage: usize) -> bool {
        stage % 2 == 1
    }
}
