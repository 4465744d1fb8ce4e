use candle_core::DType;
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{perplexity, Codebook, PaddedBatch, VqVaeModel};
use crate::error::{Error, Result};
use crate::nn::{scalar, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqMetrics {
    pub step: usize,
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
    pub perplexity: f64,
    pub grad_norm: f64,
}

/// Optimizer state for the encoder, decoder and speaker table. The codebook
/// is outside the optimizer and only moves through EMA steps.
pub struct VqVaeTrainer {
    trainer: Trainer,
    rng: ChaCha8Rng,
    step: usize,
}

impl VqVaeTrainer {
    pub fn new(model: &VqVaeModel, seed: u64) -> Result<Self> {
        Ok(Self {
            trainer: Trainer::new(model.params().vars(), model.config.learning_rate, None)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Seeds the codebook with `K` encoder outputs. With fewer outputs than
    /// codes, rows are drawn with replacement and jittered apart.
    fn init_codebook(&mut self, model: &mut VqVaeModel, z: &Array2<f64>) {
        let k = model.config.codebook_size;
        let n = z.nrows();
        let mut vectors = if n >= k {
            let idx = sample(&mut self.rng, n, k).into_vec();
            z.select(Axis(0), &idx)
        } else {
            let idx: Vec<usize> = (0..k).map(|_| self.rng.random_range(0..n)).collect();
            z.select(Axis(0), &idx)
        };
        if n < k {
            let spread = z.std(0.0).max(1e-3);
            let jitter = Normal::new(0.0, 0.01 * spread).expect("positive std");
            vectors.mapv_inplace(|v| v + jitter.sample(&mut self.rng));
        }
        model.codebook = Codebook::new(vectors);
        model.codebook_ready = true;
    }

    pub fn train_step(&mut self, model: &mut VqVaeModel, items: &[(&Array2<f64>, usize)]) -> Result<VqMetrics> {
        let cfg = model.config.clone();
        let batch = PaddedBatch::new(items, cfg.time_reduction, model.dtype())?;
        if !model.codebook_ready {
            let z = model.forward_train(&batch)?.valid_z;
            self.init_codebook(model, &z);
            if model.dtype() == DType::F32 {
                model.codebook.round_to_f32();
            }
        }
        let fwd = model.forward_train(&batch)?;
        let recon = scalar(&fwd.loss.recon)?;
        let commit = scalar(&fwd.loss.commit)?;
        let total = scalar(&fwd.loss.total)?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("vqvae recon {recon}, commit {commit}"),
            });
        }
        let grad_norm = self.trainer.step(&fwd.loss.total)?;
        let codes: Vec<usize> = fwd.codes.iter().flatten().copied().collect();
        model
            .codebook
            .ema_update(fwd.valid_z.view(), &codes, cfg.ema_decay, cfg.ema_epsilon)?;
        if model.dtype() == DType::F32 {
            model.codebook.round_to_f32();
        }
        self.step += 1;
        Ok(VqMetrics {
            step: self.step,
            recon,
            commit,
            total,
            perplexity: perplexity(&codes, cfg.codebook_size),
            grad_norm,
        })
    }
}
