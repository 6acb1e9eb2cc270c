use serde::{Deserialize, Serialize};

use crate::decoder::CachePolicy;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by every module of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Token width `C`.
    pub dim: usize,
    pub encoder_depth: usize,
    /// Number of decoder blocks `B`.
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden channels of the pointmap heads' 3x3 refinement convolutions.
    pub head_hidden: usize,
    pub rope_base: f64,
    /// Confidence regularization weight of the pointmap loss.
    pub alpha: f64,
    pub default_policy: CachePolicy,
    /// Frames 1 and 2 cross-attend each other instead of frame 1 attending
    /// itself. Off by default: it makes frame 1 depend on frame 2.
    pub mutual_first_pair: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            patch_size: 8,
            dim: 64,
            encoder_depth: 4,
            decoder_depth: 4,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 8,
            rope_base: 100.0,
            alpha: 0.2,
            default_policy: CachePolicy::FullCausal,
            mutual_first_pair: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// Tokens per frame, `K`.
    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Decoder levels tapped by the pointmap heads: `B / 2` and `B`.
    pub fn head_levels(&self) -> (usize, usize) {
        (self.decoder_depth / 2, self.decoder_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad(format!(
                "head dim {} must be a multiple of 4 for 2-D rotary embedding",
                self.head_dim()
            ));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return bad("encoder and decoder depth must be >= 1".into());
        }
        if self.patch_size == 0
            || self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "resolution {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 {
            return bad("mlp ratio and head hidden width must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive".into());
        }
        self.default_policy.validate()
    }
}
