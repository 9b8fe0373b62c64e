//! The scoring model.
//!
//! A frozen extractor turns each enrollment utterance into a unit-norm
//! embedding. A separate convolutional encoder turns the test utterance
//! into frame features. The scorer places the projected enrollments in
//! front of the test frames, runs a masked Transformer encoder and reads
//! one posterior per enrollment from the latent rows.
//!
//! The mask keeps enrollment rows from seeing each other, so adding or
//! removing enrollments never changes another enrollment's score:
//!
//! ```
//! use neural_scoring::nsnet::build_attention_mask;
//!
//! let mask = build_attention_mask(3, 2, 2).unwrap();
//! assert_eq!(mask.row(1), &[false, true, false, true, true]);
//! ```

mod extractor;
mod mask;
mod scorer;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::substrate::ConvGeom;

pub use extractor::{
    embed_enrollment, extractor_embedding, fbank_tensor, init_extractor, trunk_forward, EnrollEmbedding,
};
pub use mask::{build_attention_mask, AttentionMask};
pub use scorer::{
    encode_test_frames, init_scorer, positional_encoding, score_forward, score_trials, write_score_file, FrameFeatures,
    NsScorer, ScoreMatrix,
};

/// Residual placement inside each encoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// Residual, then layer norm.
    #[default]
    Post,
    /// Layer norm on the sublayer input, plus a final norm.
    Pre,
}

/// Network dimensions and structural switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Enrollment embedding width E.
    pub embed_dim: usize,
    /// Scoring network width D.
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// Output channels of each stride-2 convolution.
    pub conv_channels: Vec<usize>,
    /// Width of the extractor's frame layer before pooling.
    pub frame_dim: usize,
    pub norm: NormPlacement,
    pub positional_encoding: bool,
    /// Compute test frames with the frozen extractor trunk.
    pub shared_encoder: bool,
    /// Let test rows attend to enrollment rows.
    pub test_attends_enrollment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            layers: 1,
            conv_channels: vec![8, 16],
            frame_dim: 64,
            norm: NormPlacement::Post,
            positional_encoding: true,
            shared_encoder: false,
            test_attends_enrollment: false,
        }
    }
}

pub(crate) const CONV: ConvGeom = ConvGeom {
    kernel: (3, 3),
    stride: (2, 2),
    pad: (1, 1),
};

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.embed_dim >= 1, Config, "embed_dim must be positive");
        ensure!(
            self.model_dim >= 2 && self.model_dim.is_multiple_of(2),
            Config,
            "model_dim must be even and at least 2"
        );
        ensure!(
            self.heads >= 1 && self.model_dim.is_multiple_of(self.heads),
            Config,
            "model_dim {} not divisible by {} heads",
            self.model_dim,
            self.heads
        );
        ensure!(
            self.ff_dim >= 1 && self.frame_dim >= 1,
            Config,
            "ff_dim and frame_dim must be positive"
        );
        ensure!(self.layers >= 1, Config, "need at least one encoder layer");
        ensure!(
            !self.conv_channels.is_empty() && self.conv_channels.iter().all(|&c| c >= 1),
            Config,
            "conv_channels must be a non-empty list of positive counts"
        );
        Ok(())
    }

    /// Time downsampling factor of the convolution stack.
    pub fn temporal_stride(&self) -> usize {
        1 << self.conv_channels.len()
    }

    /// Frequency bins left after the convolution stack.
    pub fn conv_bins(&self, n_mels: usize) -> usize {
        self.conv_channels.iter().fold(n_mels, |f, _| f.div_ceil(2))
    }

    /// Flattened `F · C` width of one encoder frame.
    pub fn flat_dim(&self, n_mels: usize) -> usize {
        self.conv_bins(n_mels) * self.conv_channels.last().copied().unwrap_or(1)
    }

    /// `T' = ceil(T / stride)`.
    pub fn encoded_frames(&self, frames: usize) -> usize {
        self.conv_channels.iter().fold(frames, |t, _| t.div_ceil(2))
    }
}
