use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{s2s_loss, token_accuracy, S2sBatch, S2sModel};
use crate::error::{Error, Result};
use crate::nn::{scalar, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2sMetrics {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub grad_norm: f64,
}

pub struct S2sTrainer {
    trainer: Trainer,
    rng: ChaCha8Rng,
    step: usize,
}

impl S2sTrainer {
    pub fn new(model: &S2sModel, seed: u64) -> Result<Self> {
        let cfg = &model.config;
        Ok(Self {
            trainer: Trainer::new(model.params().vars(), cfg.learning_rate, Some(cfg.grad_clip))?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    /// One NLL step on `(source MFCC, target codes)` pairs.
    pub fn train_step(&mut self, model: &S2sModel, pairs: &[(&Array2<f64>, &[usize])]) -> Result<S2sMetrics> {
        let batch = S2sBatch::new(pairs, &model.config, model.dtype())?;
        let rng = &mut self.rng;
        let mut coin = || rng.random::<f64>();
        let logits = model.forward_batch(&batch, model.config.teacher_forcing, &mut coin)?;
        let loss = s2s_loss(&logits, &batch.dec_out)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("s2s NLL {value}"),
            });
        }
        let (correct, total) = token_accuracy(&logits, &batch.dec_out)?;
        let grad_norm = self.trainer.step(&loss)?;
        self.step += 1;
        Ok(S2sMetrics {
            step: self.step,
            loss: value,
            token_acc: correct as f64 / total.max(1) as f64,
            grad_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureKind, FeatureSequence};
    use crate::s2s::{AttentionKind, S2sConfig};
    use candle_core::DType;

    fn pairs() -> Vec<(Array2<f64>, Vec<usize>)> {
        (0..6)
            .map(|u| {
                let codes: Vec<usize> = (0..3 + u % 3).map(|i| (u + 2 * i) % 6).collect();
                let x = Array2::from_shape_fn((4 * codes.len(), 4), |(t, d)| {
                    let c = codes[t / 4] as f64;
                    ((c + 1.0) * (d as f64 + 1.0) * 0.7).sin()
                });
                (x, codes)
            })
            .collect()
    }

    fn config() -> S2sConfig {
        S2sConfig {
            codebook_size: 6,
            input_dim: 4,
            enc_layers: 2,
            enc_hidden: 24,
            dec_hidden: 32,
            embed_dim: 8,
            attention: AttentionKind::Mlp,
            attention_dim: 16,
            max_decode_len: 20,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let data = pairs();
        let refs: Vec<(&Array2<f64>, &[usize])> = data.iter().map(|(x, y)| (x, y.as_slice())).collect();
        let cfg = S2sConfig {
            codebook_size: 32,
            ..config()
        };
        let m = S2sModel::new(cfg, 1, DType::F32).unwrap();
        let mut t = S2sTrainer::new(&m, 1).unwrap();
        let first = t.train_step(&m, &refs).unwrap();
        let uniform = 34f64.ln();
        assert!((first.loss - uniform).abs() < 0.2 * uniform, "{}", first.loss);
    }

    #[test]
    fn memorises_small_set() {
        let data = pairs();
        let refs: Vec<(&Array2<f64>, &[usize])> = data.iter().map(|(x, y)| (x, y.as_slice())).collect();
        let m = S2sModel::new(config(), 2, DType::F32).unwrap();
        let mut t = S2sTrainer::new(&m, 2).unwrap();
        let mut last = None;
        for _ in 0..150 {
            last = Some(t.train_step(&m, &refs).unwrap());
        }
        assert!(last.unwrap().token_acc >= 0.95);
        let mut exact = 0;
        for (x, y) in &data {
            let seq = FeatureSequence::new(x.clone(), FeatureKind::Mfcc39, 10.0).unwrap();
            exact += (m.greedy(&seq).unwrap().tokens == *y) as usize;
        }
        assert!(exact >= 5, "{exact}/6 exact");
    }

    #[test]
    fn reproducible() {
        let data = pairs();
        let refs: Vec<(&Array2<f64>, &[usize])> = data.iter().map(|(x, y)| (x, y.as_slice())).collect();
        let run = || {
            let m = S2sModel::new(config(), 3, DType::F32).unwrap();
            let mut t = S2sTrainer::new(&m, 3).unwrap();
            (0..3).map(|_| t.train_step(&m, &refs).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
