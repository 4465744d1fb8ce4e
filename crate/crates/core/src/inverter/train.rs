use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::inverter_loss;
use super::model::{InverterBatch, InverterModel};
use crate::error::{Error, Result};
use crate::nn::{scalar, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Adam on the inverter parameters; the bound codebook stays fixed.
pub struct InverterTrainer {
    trainer: Trainer,
    step: usize,
}

impl InverterTrainer {
    pub fn new(model: &InverterModel) -> Result<Self> {
        Ok(Self {
            trainer: Trainer::new(model.params().vars(), model.config.learning_rate, None)?,
            step: 0,
        })
    }

    /// One step on `(codes, linear spectrogram)` pairs.
    pub fn train_step(&mut self, model: &InverterModel, pairs: &[(&[usize], &Array2<f64>)]) -> Result<InverterMetrics> {
        let codes: Vec<&[usize]> = pairs.iter().map(|(c, _)| *c).collect();
        let targets: Vec<&Array2<f64>> = pairs.iter().map(|(_, t)| *t).collect();
        let batch = InverterBatch::new(
            &codes,
            Some(&targets),
            &model.codebook,
            model.config.time_reduction,
            model.dtype(),
        )?;
        let pred = model.forward(&batch.x, &batch.mask, true)?;
        let target = batch.target.as_ref().expect("targets were supplied");
        let loss = inverter_loss(&pred, target, Some(&batch.mask))?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("inverter loss {value}"),
            });
        }
        let grad_norm = self.trainer.step(&loss)?;
        self.step += 1;
        Ok(InverterMetrics {
            step: self.step,
            loss: value,
            grad_norm,
        })
    }

    /// Loss on a batch in inference mode, without updating anything.
    pub fn evaluate(model: &InverterModel, pairs: &[(&[usize], &Array2<f64>)]) -> Result<f64> {
        let codes: Vec<&[usize]> = pairs.iter().map(|(c, _)| *c).collect();
        let targets: Vec<&Array2<f64>> = pairs.iter().map(|(_, t)| *t).collect();
        let batch = InverterBatch::new(
            &codes,
            Some(&targets),
            &model.codebook,
            model.config.time_reduction,
            model.dtype(),
        )?;
        let pred = model.forward(&batch.x, &batch.mask, false)?.relu()?;
        scalar(&inverter_loss(&pred, batch.target.as_ref().expect("targets"), Some(&batch.mask))?)
    }
}
