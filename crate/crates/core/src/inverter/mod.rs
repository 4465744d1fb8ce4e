//! Codebook inverter: code embeddings, repeated `r` times each, to linear
//! magnitude spectrograms, then to audio through Griffin-Lim.

mod model;
mod train;

pub use model::{InverterBatch, InverterModel, Synthesis};
pub use train::{InverterMetrics, InverterTrainer};

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vqvae::Codebook;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverterConfig {
    /// Repeat factor `r`; equals the VQ-VAE time reduction.
    pub time_reduction: usize,
    #[serde(rename = "D_e", alias = "code_dim")]
    pub code_dim: usize,
    pub channels: usize,
    /// Kernel widths of the parallel branches in each residual block.
    pub kernels: Vec<usize>,
    pub pre_blocks: usize,
    pub post_blocks: usize,
    pub lstm_layers: usize,
    /// Per-direction width of the recurrent stack.
    pub lstm_hidden: usize,
    pub output_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub gl_iters: usize,
}

impl Default for InverterConfig {
    fn default() -> Self {
        Self {
            time_reduction: 12,
            code_dim: 64,
            channels: 256,
            kernels: vec![1, 3, 5, 7],
            pre_blocks: 2,
            post_blocks: 2,
            lstm_layers: 2,
            lstm_hidden: 128,
            output_dim: 1025,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            gl_iters: 60,
        }
    }
}

impl InverterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_reduction == 0 {
            return Err(Error::Config("inverter repeat factor must be >= 1".into()));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "inverter kernels must be odd and non-empty, got {:?}",
                self.kernels
            )));
        }
        if self.channels == 0 || self.code_dim == 0 || self.output_dim == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("inverter widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Row `t * r + j` is `E[codes[t]]` for `j` in `0..r`.
pub fn upsample_codes(codes: &[usize], cb: &Codebook, r: usize) -> Result<Array2<f64>> {
    if r == 0 {
        return Err(Error::InvalidInput("repeat factor must be >= 1".into()));
    }
    let k = cb.size();
    let d = cb.dim();
    let mut out = Array2::zeros((codes.len() * r, d));
    for (t, &c) in codes.iter().enumerate() {
        if c >= k {
            return Err(Error::TokenOutOfRange { token: c, vocab: k });
        }
        for j in 0..r {
            out.row_mut(t * r + j).assign(&cb.vectors.row(c));
        }
    }
    Ok(out)
}

/// Mean over valid frames of the per-frame Euclidean distance.
///
/// `pred` and `target` are `(B, T, F)`, `mask` is `(B, T)`. The norm is
/// taken as `sqrt(s + 1e-18) - 1e-9`, which is exact at zero and keeps
/// the gradient finite there.
pub fn inverter_loss(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (b, t, _) = pred.dims3()?;
    let sq = (pred - target)?.sqr()?.sum(2)?;
    let norm = ((sq + 1e-18)?.sqrt()? - 1e-9)?;
    let mask = match mask {
        Some(m) => m.clone(),
        None => Tensor::ones((b, t), pred.dtype(), pred.device())?,
    };
    let count = crate::nn::scalar(&mask.sum_all()?)?.max(1.0);
    Ok(((norm * mask)?.sum_all()? / count)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::{DType, Device};
    use ndarray::array;

    #[test]
    fn repeat_blocks() {
        let cb = Codebook::new(array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]);
        let u = upsample_codes(&[2], &cb, 3).unwrap();
        assert_eq!(u, array![[4.0, 5.0], [4.0, 5.0], [4.0, 5.0]]);
        assert_eq!(upsample_codes(&[1, 0], &cb, 1).unwrap(), array![[2.0, 3.0], [0.0, 1.0]]);
        assert!(upsample_codes(&[3], &cb, 2).is_err());
    }

    #[test]
    fn loss_of_constant_offset() {
        let dev = Device::Cpu;
        let target = Tensor::randn(0.0, 1.0, (2, 5, 4), &dev).unwrap().to_dtype(DType::F64).unwrap();
        assert_eq!(scalar(&inverter_loss(&target, &target, None).unwrap()).unwrap(), 0.0);
        // each frame shifted by (1.5, 0, 2, 0): norm 2.5
        let offset = Tensor::from_vec(vec![1.5, 0.0, 2.0, 0.0], (1, 1, 4), &dev).unwrap();
        let pred = target.broadcast_add(&offset).unwrap();
        let l = scalar(&inverter_loss(&pred, &target, None).unwrap()).unwrap();
        assert!((l - 2.5).abs() < 1e-8);
        let bad = Tensor::zeros((2, 5, 3), DType::F64, &dev).unwrap();
        assert!(inverter_loss(&bad, &target, None).is_err());
    }

    #[test]
    fn zero_distance_has_finite_gradient() {
        let dev = Device::Cpu;
        let v = candle_core::Var::from_tensor(&Tensor::ones((1, 2, 3), DType::F64, &dev).unwrap()).unwrap();
        let target = Tensor::ones((1, 2, 3), DType::F64, &dev).unwrap();
        let l = inverter_loss(v.as_tensor(), &target, None).unwrap();
        let g = l.backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }
}
