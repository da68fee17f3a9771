//! Toy-scale pixel module (encoder + pixel decoder), query-based segment
//! decoder, frozen class embeddings and parameter checkpoints.

mod checkpoint;
mod embed;
mod head;
mod pixel;
mod segment;

pub use checkpoint::Checkpoint;
pub use embed::{class_embeddings, ClassEmbedder};
pub use head::LinearHead;
pub use pixel::{PixelForward, PixelModule, ENCODER_STRIDE};
pub use segment::SegmentModule;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use segda_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Layer sizes of the networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Image channels.
    pub in_channels: usize,
    /// Width of the first (full-resolution) encoder conv.
    pub stem_channels: usize,
    /// Width of the first stride-2 encoder conv.
    pub mid_channels: usize,
    /// Encoder output channels `C_E`.
    pub encoder_channels: usize,
    /// Width of the hidden pixel-decoder conv.
    pub decoder_channels: usize,
    /// Pixel feature dimension `d` (also the segment dimension `d_S`).
    pub feature_dim: usize,
    /// Hidden width of the segment decoder feed-forward block.
    pub ff_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            mid_channels: 32,
            encoder_channels: 32,
            decoder_channels: 32,
            feature_dim: 16,
            ff_dim: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.in_channels,
            self.stem_channels,
            self.mid_channels,
            self.encoder_channels,
            self.decoder_channels,
            self.feature_dim,
            self.ff_dim,
        ];
        if sizes.contains(&0) {
            return Err(CoreError::Config("architecture sizes must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}
