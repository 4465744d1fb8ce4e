//! Unsupervised unit discovery with a vector-quantised autoencoder.
//!
//! The encoder downsamples MFCC frames by `time_reduction` into continuous
//! vectors `z`, each snapped to its nearest codebook entry. The decoder
//! rebuilds the frames from the selected entries plus a speaker embedding.
//! Codebook entries are moved only by exponential moving averages of the
//! encoder outputs assigned to them, never by loss gradients.

mod codebook;
mod model;
mod train;

pub use codebook::{perplexity, Codebook, QuantizationResult};
pub use model::{vqvae_loss, LossBreakdown, PaddedBatch, TrainForward, VqVaeModel};
pub use train::{VqMetrics, VqVaeTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqVaeConfig {
    #[serde(rename = "K", alias = "codebook_size")]
    pub codebook_size: usize,
    #[serde(rename = "D_e", alias = "code_dim")]
    pub code_dim: usize,
    pub time_reduction: usize,
    pub stride_schedule: Vec<usize>,
    #[serde(rename = "L", alias = "num_speakers")]
    pub num_speakers: usize,
    #[serde(rename = "D_v", alias = "speaker_dim")]
    pub speaker_dim: usize,
    pub input_dim: usize,
    pub channels: usize,
    /// Commitment weight.
    pub gamma: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 64,
            time_reduction: 12,
            stride_schedule: default_stride_schedule(12),
            num_speakers: 1,
            speaker_dim: 16,
            input_dim: 39,
            channels: 256,
            gamma: 0.25,
            ema_decay: 0.999,
            ema_epsilon: 1e-5,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 2000,
        }
    }
}

/// Stride-2 blocks with one stride-3 block when 3 divides the factor:
/// 4 -> [2, 2], 8 -> [2, 2, 2], 12 -> [2, 2, 3]. Other factors are split
/// into ascending prime factors.
pub fn default_stride_schedule(time_reduction: usize) -> Vec<usize> {
    let mut n = time_reduction;
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

impl VqVaeConfig {
    pub fn with_grid(codebook_size: usize, time_reduction: usize) -> Self {
        Self {
            codebook_size,
            time_reduction,
            stride_schedule: default_stride_schedule(time_reduction),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let product: usize = self.stride_schedule.iter().product();
        if product != self.time_reduction || self.time_reduction == 0 {
            return Err(Error::Config(format!(
                "stride schedule {:?} multiplies to {}, expected time_reduction {}",
                self.stride_schedule, product, self.time_reduction
            )));
        }
        if self.stride_schedule.contains(&0) {
            return Err(Error::Config("zero stride".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("commitment weight gamma must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.ema_epsilon < 0.0 {
            return Err(Error::Config("ema_epsilon must be non-negative".into()));
        }
        if self.num_speakers == 0 || self.code_dim == 0 || self.channels == 0 || self.input_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}
