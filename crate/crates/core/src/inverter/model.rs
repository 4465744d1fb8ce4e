use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array1, Array2};

use super::{upsample_codes, InverterConfig};
use crate::checkpoint::{Checkpoint, ModelKind, TensorMap};
use crate::error::{Error, Result};
use crate::features::{griffin_lim, CorpusStats, FeatureConfig, FeatureKind, FeatureSequence, Waveform};
use crate::nn::{leaky_relu, length_mask, BatchNorm1d, BiLstm, Conv1d, Linear, ParamStore};
use crate::vqvae::Codebook;

const SLOPE: f64 = 0.2;

/// `x + lrelu(bn(sum_k conv_k(x)))`, padded frames zeroed afterwards.
struct MultiscaleBlock {
    branches: Vec<Conv1d>,
    bn: BatchNorm1d,
}

impl MultiscaleBlock {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, kernels: &[usize]) -> Result<Self> {
        let branches = kernels
            .iter()
            .map(|&k| Conv1d::new(ps, &format!("{name}.k{k}"), ch, ch, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            bn: BatchNorm1d::new(ps, &format!("{name}.bn"), ch)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let mut sum = self.branches[0].forward(x)?;
        for b in &self.branches[1..] {
            sum = (sum + b.forward(x)?)?;
        }
        let h = leaky_relu(&self.bn.forward(&sum, mask, train)?, SLOPE)?;
        Ok((x + h)?.broadcast_mul(mask)?)
    }
}

/// Code sequences (and optionally target spectrograms) padded to one length.
pub struct InverterBatch {
    /// `(B, T, D_e)` repeated code embeddings.
    pub x: Tensor,
    /// `(B, T)`, ones on frames that are scored.
    pub mask: Tensor,
    /// `(B, T, F)` when targets were given.
    pub target: Option<Tensor>,
    pub lengths: Vec<usize>,
}

impl InverterBatch {
    /// Targets are trimmed to `min(T_X, T_Y * r)`; frames past that are
    /// masked. A pair whose lengths differ by more than `r` is rejected.
    pub fn new(
        codes: &[&[usize]],
        targets: Option<&[&Array2<f64>]>,
        codebook: &Codebook,
        r: usize,
        dtype: DType,
    ) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if let Some(t) = targets {
            if t.len() != codes.len() {
                return Err(Error::Shape(format!("{} targets for {} code sequences", t.len(), codes.len())));
            }
        }
        let t_max = codes.iter().map(|c| c.len() * r).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::InvalidInput("empty code sequence".into()));
        }
        let d = codebook.dim();
        let b = codes.len();
        let mut xs = vec![0.0f64; b * t_max * d];
        let mut lengths = Vec::with_capacity(b);
        for (i, c) in codes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::InvalidInput("empty code sequence".into()));
            }
            let up = upsample_codes(c, codebook, r)?;
            let off = i * t_max * d;
            xs[off..off + up.len()].iter_mut().zip(up.iter()).for_each(|(o, v)| *o = *v);
            let t_y_r = c.len() * r;
            let len = match targets {
                Some(t) => {
                    let t_x = t[i].nrows();
                    if t_x.abs_diff(t_y_r) > r {
                        return Err(Error::InvalidInput(format!(
                            "misaligned pair: {t_x} spectrogram frames vs {} codes x {r}",
                            c.len()
                        )));
                    }
                    t_x.min(t_y_r)
                }
                None => t_y_r,
            };
            lengths.push(len);
        }
        let dev = Device::Cpu;
        let x = Tensor::from_vec(xs, (b, t_max, d), &dev)?.to_dtype(dtype)?;
        let target = match targets {
            Some(ts) => {
                let f = ts[0].ncols();
                let mut data = vec![0.0f64; b * t_max * f];
                for (i, t) in ts.iter().enumerate() {
                    if t.ncols() != f {
                        return Err(Error::Shape("targets with different widths in one batch".into()));
                    }
                    for (row_idx, row) in t.rows().into_iter().take(lengths[i]).enumerate() {
                        let off = (i * t_max + row_idx) * f;
                        data[off..off + f].iter_mut().zip(row.iter()).for_each(|(o, v)| *o = *v);
                    }
                }
                Some(Tensor::from_vec(data, (b, t_max, f), &dev)?.to_dtype(dtype)?)
            }
            None => None,
        };
        Ok(Self {
            x,
            mask: length_mask(&lengths, t_max, dtype, &dev)?,
            target,
            lengths,
        })
    }
}

pub struct Synthesis {
    pub waveform: Waveform,
    pub spectrogram: FeatureSequence,
    pub spectral_convergence: f64,
}

pub struct InverterModel {
    pub config: InverterConfig,
    /// Frozen copy of the VQ-VAE codebook the inverter reads from.
    pub codebook: Codebook,
    /// Output scaling; the network predicts standardised magnitudes.
    pub stats: CorpusStats,
    params: ParamStore,
    input: Conv1d,
    pre: Vec<MultiscaleBlock>,
    lstms: Vec<BiLstm>,
    bridge: Linear,
    post: Vec<MultiscaleBlock>,
    output: Conv1d,
}

impl InverterModel {
    pub fn new(
        config: InverterConfig,
        codebook: Codebook,
        stats: Option<CorpusStats>,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if codebook.dim() != config.code_dim {
            return Err(Error::Config(format!(
                "codebook dimension {} vs inverter code_dim {}",
                codebook.dim(),
                config.code_dim
            )));
        }
        let f = config.output_dim;
        let mut stats = stats.unwrap_or_else(|| CorpusStats {
            mean: Array1::zeros(f),
            std: Array1::ones(f),
        });
        let mut codebook = codebook;
        if dtype == DType::F32 {
            codebook.round_to_f32();
            stats.mean.mapv_inplace(|v| v as f32 as f64);
            stats.std.mapv_inplace(|v| v as f32 as f64);
        }
        if stats.dim() != f {
            return Err(Error::Config(format!("stats dimension {} vs output_dim {f}", stats.dim())));
        }
        let mut ps = ParamStore::new(seed, dtype);
        let ch = config.channels;
        let input = Conv1d::new(&mut ps, "input", config.code_dim, ch, 3)?;
        let pre = (0..config.pre_blocks)
            .map(|i| MultiscaleBlock::new(&mut ps, &format!("pre{i}"), ch, &config.kernels))
            .collect::<Result<Vec<_>>>()?;
        let mut lstms = Vec::with_capacity(config.lstm_layers);
        let mut width = ch;
        for l in 0..config.lstm_layers {
            lstms.push(BiLstm::new(&mut ps, &format!("lstm{l}"), width, config.lstm_hidden)?);
            width = 2 * config.lstm_hidden;
        }
        let bridge = Linear::new(&mut ps, "bridge", width, ch)?;
        let post = (0..config.post_blocks)
            .map(|i| MultiscaleBlock::new(&mut ps, &format!("post{i}"), ch, &config.kernels))
            .collect::<Result<Vec<_>>>()?;
        let output = Conv1d::new(&mut ps, "output", ch, f, 1)?;
        Ok(Self {
            config,
            codebook,
            stats,
            params: ps,
            input,
            pre,
            lstms,
            bridge,
            post,
            output,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn stat_tensor(&self, v: &Array1<f64>) -> Result<Tensor> {
        let f = v.len();
        Ok(Tensor::from_vec(v.to_vec(), (1, 1, f), self.params.device())?.to_dtype(self.dtype())?)
    }

    /// Predicted magnitudes `(B, T, F)` for repeated embeddings `(B, T, D_e)`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let m3 = mask.reshape((b, 1, t))?;
        let mut h = self.input.forward(&x.transpose(1, 2)?.contiguous()?)?.broadcast_mul(&m3)?;
        for block in &self.pre {
            h = block.forward(&h, &m3, train)?;
        }
        let mut seq = h.transpose(1, 2)?.contiguous()?;
        for lstm in &self.lstms {
            seq = lstm.forward(&seq, mask)?;
        }
        h = self.bridge.forward(&seq)?.transpose(1, 2)?.contiguous()?.broadcast_mul(&m3)?;
        for block in &self.post {
            h = block.forward(&h, &m3, train)?;
        }
        let y = self.output.forward(&leaky_relu(&h, SLOPE)?)?.transpose(1, 2)?;
        let y = y
            .broadcast_mul(&self.stat_tensor(&self.stats.std)?)?
            .broadcast_add(&self.stat_tensor(&self.stats.mean)?)?;
        Ok(y)
    }

    /// Linear magnitude spectrogram with `len(codes) * r` frames, clamped
    /// to be non-negative.
    pub fn invert_codes(&self, codes: &[usize]) -> Result<FeatureSequence> {
        if codes.is_empty() {
            return Err(Error::InvalidInput("cannot invert an empty code sequence".into()));
        }
        let batch = InverterBatch::new(&[codes], None, &self.codebook, self.config.time_reduction, self.dtype())?;
        let y = self.forward(&batch.x, &batch.mask, false)?.squeeze(0)?;
        let (t, f) = y.dims2()?;
        let data = y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let frames = Array2::from_shape_vec((t, f), data)
            .expect("output shape")
            .mapv(|v| v.max(0.0));
        FeatureSequence::new(frames, FeatureKind::Linear1025, 10.0)
    }

    pub fn synthesize(&self, codes: &[usize], cfg: &FeatureConfig) -> Result<Synthesis> {
        let spectrogram = self.invert_codes(codes)?;
        let gl = griffin_lim(&spectrogram, self.config.gl_iters, cfg)?;
        Ok(Synthesis {
            waveform: gl.waveform,
            spectrogram,
            spectral_convergence: gl.spectral_convergence,
        })
    }

    fn batch_norms(&self) -> impl Iterator<Item = (String, &BatchNorm1d)> {
        let pre = self.pre.iter().enumerate().map(|(i, b)| (format!("pre{i}"), &b.bn));
        let post = self.post.iter().enumerate().map(|(i, b)| (format!("post{i}"), &b.bn));
        pre.chain(post)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: TensorMap = self.params.to_flat()?;
        let f32s = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        for (name, bn) in self.batch_norms() {
            let (m, v) = bn.running_stats();
            tensors.insert(format!("state.{name}.running_mean"), (vec![m.len()], f32s(&m)));
            tensors.insert(format!("state.{name}.running_var"), (vec![v.len()], f32s(&v)));
        }
        let (k, d) = self.codebook.vectors.dim();
        tensors.insert(
            "state.codebook".into(),
            (vec![k, d], self.codebook.vectors.iter().map(|x| *x as f32).collect()),
        );
        let f = self.stats.dim();
        tensors.insert("state.stats.mean".into(), (vec![f], f32s(&self.stats.mean.to_vec())));
        tensors.insert("state.stats.std".into(), (vec![f], f32s(&self.stats.std.to_vec())));
        Ok(Checkpoint {
            kind: ModelKind::Inverter,
            config_json: serde_json::to_string(&self.config)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Inverter)?;
        let config: InverterConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut tensors = ckpt.tensors.clone();
        let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let (d, v) = tensors
                .remove(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            Ok((d, v.into_iter().map(f64::from).collect()))
        };
        let (cd, cv) = take("state.codebook")?;
        if cd.len() != 2 {
            return Err(Error::CheckpointMismatch("codebook must be a matrix".into()));
        }
        let codebook = Codebook::new(Array2::from_shape_vec((cd[0], cd[1]), cv).expect("dims match data"));
        let (_, mean) = take("state.stats.mean")?;
        let (_, std) = take("state.stats.std")?;
        let stats = CorpusStats {
            mean: mean.into(),
            std: std.into(),
        };
        let mut running = Vec::new();
        let model = Self::new(config, codebook, Some(stats), 0, dtype)?;
        for (name, _) in model.batch_norms() {
            let (_, m) = take(&format!("state.{name}.running_mean"))?;
            let (_, v) = take(&format!("state.{name}.running_var"))?;
            running.push((m, v));
        }
        for ((_, bn), (m, v)) in model.batch_norms().zip(running) {
            bn.set_running_stats(m, v)?;
        }
        model.params.load_flat(&tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    pub(crate) fn tiny_config(r: usize) -> InverterConfig {
        InverterConfig {
            time_reduction: r,
            code_dim: 3,
            channels: 6,
            kernels: vec![1, 3],
            pre_blocks: 1,
            post_blocks: 1,
            lstm_layers: 1,
            lstm_hidden: 4,
            output_dim: 7,
            ..Default::default()
        }
    }

    fn codebook() -> Codebook {
        Codebook::new(Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.4))
    }

    #[test]
    fn output_length_is_codes_times_r() {
        let m = InverterModel::new(tiny_config(4), codebook(), None, 1, DType::F32).unwrap();
        let s = m.invert_codes(&[0, 3, 1]).unwrap();
        assert_eq!(s.frames.dim(), (12, 7));
        assert!(s.frames.iter().all(|v| *v >= 0.0));
        assert!(m.invert_codes(&[]).is_err());
        assert!(m.invert_codes(&[5]).is_err());
    }

    #[test]
    fn alignment_rule() {
        let cb = codebook();
        let codes: &[usize] = &[1, 2, 3];
        let short = Array2::zeros((10, 7));
        let b = InverterBatch::new(&[codes], Some(&[&short]), &cb, 4, DType::F32).unwrap();
        assert_eq!(b.lengths, vec![10]);
        let far = Array2::zeros((7, 7));
        assert!(InverterBatch::new(&[codes], Some(&[&far]), &cb, 4, DType::F32).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let stats = CorpusStats {
            mean: Array1::from_elem(7, 0.5),
            std: Array1::from_elem(7, 2.0),
        };
        let m = InverterModel::new(tiny_config(2), codebook(), Some(stats), 4, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inv.ckpt");
        m.save(&p).unwrap();
        let back = InverterModel::load(&p).unwrap();
        assert_eq!(back.to_checkpoint().unwrap(), m.to_checkpoint().unwrap());
        assert_eq!(back.invert_codes(&[1, 4]).unwrap(), m.invert_codes(&[1, 4]).unwrap());
    }
}
