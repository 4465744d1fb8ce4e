use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Codebook, VqVaeConfig};
use crate::checkpoint::{Checkpoint, ModelKind, TensorMap};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::nn::{leaky_relu, length_mask, scalar, Conv1d, Init, Linear, ParamStore};

const SLOPE: f64 = 0.2;

/// Residual block: `x + conv1(lrelu(conv3([lrelu(x); cond])))`.
struct ResBlock {
    wide: Conv1d,
    point: Conv1d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, cond: usize) -> Result<Self> {
        Ok(Self {
            wide: Conv1d::new(ps, &format!("{name}.conv3"), ch + cond, ch, 3)?,
            point: Conv1d::new(ps, &format!("{name}.conv1"), ch, ch, 1)?,
        })
    }

    fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut h = leaky_relu(x, SLOPE)?;
        if let Some(c) = cond {
            let (b, d, _) = c.dims3()?;
            let t = x.dims()[2];
            let c = c.narrow(2, 0, 1)?.broadcast_as((b, d, t))?.contiguous()?;
            h = Tensor::cat(&[&h, &c], 1)?;
        }
        let h = self.wide.forward(&h)?;
        let h = self.point.forward(&leaky_relu(&h, SLOPE)?)?;
        Ok((x + h)?)
    }
}

/// Strided resampling with kernel = stride, written as a per-group linear
/// map. Down merges `s` frames into one, up splits one frame into `s`.
struct Resample {
    proj: Linear,
    stride: usize,
    up: bool,
}

impl Resample {
    fn down(ps: &mut ParamStore, name: &str, ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, stride * ch, ch)?,
            stride,
            up: false,
        })
    }

    fn up(ps: &mut ParamStore, name: &str, ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, ch, stride * ch)?,
            stride,
            up: true,
        })
    }

    /// `(B, C, T)` -> `(B, C, T / s)` or `(B, C, T * s)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let xt = x.transpose(1, 2)?.contiguous()?;
        let s = self.stride;
        let y = if self.up {
            self.proj.forward(&xt)?.reshape((b, t * s, c))?
        } else {
            if t % s != 0 {
                return Err(Error::Shape(format!("length {t} is not a multiple of stride {s}")));
            }
            self.proj.forward(&xt.reshape((b, t / s, s * c))?)?
        };
        Ok(y.transpose(1, 2)?)
    }
}

struct Encoder {
    input: Conv1d,
    stages: Vec<(ResBlock, Resample)>,
    tail: ResBlock,
    output: Conv1d,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &VqVaeConfig) -> Result<Self> {
        let ch = cfg.channels;
        let input = Conv1d::new(ps, "enc.input", cfg.input_dim, ch, 3)?;
        let mut stages = Vec::new();
        for (i, &s) in cfg.stride_schedule.iter().enumerate() {
            stages.push((
                ResBlock::new(ps, &format!("enc.block{i}"), ch, 0)?,
                Resample::down(ps, &format!("enc.down{i}"), ch, s)?,
            ));
        }
        Ok(Self {
            input,
            stages,
            tail: ResBlock::new(ps, "enc.tail", ch, 0)?,
            output: Conv1d::new(ps, "enc.output", ch, cfg.code_dim, 1)?,
        })
    }

    /// `(B, T, D_x)` -> `(B, T / r, D_e)`
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(&x.transpose(1, 2)?.contiguous()?)?;
        for (block, down) in &self.stages {
            h = down.forward(&block.forward(&h, None)?)?;
        }
        h = self.tail.forward(&h, None)?;
        let z = self.output.forward(&leaky_relu(&h, SLOPE)?)?;
        Ok(z.transpose(1, 2)?.contiguous()?)
    }
}

struct Decoder {
    input: Conv1d,
    head: ResBlock,
    stages: Vec<(Resample, ResBlock)>,
    output: Conv1d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &VqVaeConfig) -> Result<Self> {
        let ch = cfg.channels;
        let dv = cfg.speaker_dim;
        let input = Conv1d::new(ps, "dec.input", cfg.code_dim + dv, ch, 3)?;
        let head = ResBlock::new(ps, "dec.head", ch, dv)?;
        let mut stages = Vec::new();
        for (i, &s) in cfg.stride_schedule.iter().rev().enumerate() {
            stages.push((
                Resample::up(ps, &format!("dec.up{i}"), ch, s)?,
                ResBlock::new(ps, &format!("dec.block{i}"), ch, dv)?,
            ));
        }
        Ok(Self {
            input,
            head,
            stages,
            output: Conv1d::new(ps, "dec.output", ch, cfg.input_dim, 1)?,
        })
    }

    /// `(B, T_Y, D_e)` with speaker vectors `(B, D_v)` -> `(B, T_Y * r, D_x)`
    fn forward(&self, q: &Tensor, spk: &Tensor) -> Result<Tensor> {
        let (b, t, _) = q.dims3()?;
        let dv = spk.dims()[1];
        let cond = spk.reshape((b, dv, 1))?;
        let spread = cond.broadcast_as((b, dv, t))?.contiguous()?;
        let qt = q.transpose(1, 2)?.contiguous()?;
        let mut h = self.input.forward(&Tensor::cat(&[&qt, &spread], 1)?)?;
        h = self.head.forward(&h, Some(&cond))?;
        for (up, block) in &self.stages {
            h = block.forward(&up.forward(&h)?, Some(&cond))?;
        }
        let y = self.output.forward(&leaky_relu(&h, SLOPE)?)?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }
}

/// Right-padded training batch. Each utterance is padded by repeating its
/// last frame up to a common multiple of the time reduction.
pub struct PaddedBatch {
    /// `(B, T, D_x)`
    pub x: Tensor,
    /// `(B, T)`
    pub frame_mask: Tensor,
    /// `(B, T / r)`
    pub code_mask: Tensor,
    pub speakers: Vec<usize>,
    pub lengths: Vec<usize>,
    pub code_lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(items: &[(&Array2<f64>, usize)], time_reduction: usize, dtype: DType) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let dim = items[0].0.ncols();
        let r = time_reduction;
        let mut lengths = Vec::with_capacity(items.len());
        for (x, _) in items {
            if x.nrows() == 0 {
                return Err(Error::InvalidInput("empty feature sequence in batch".into()));
            }
            if x.ncols() != dim {
                return Err(Error::Shape(format!("feature dims {} and {} in one batch", dim, x.ncols())));
            }
            lengths.push(x.nrows());
        }
        let code_lengths: Vec<usize> = lengths.iter().map(|&t| t.div_ceil(r)).collect();
        let t_y = *code_lengths.iter().max().expect("non-empty batch");
        let t_max = t_y * r;
        let mut data = Vec::with_capacity(items.len() * t_max * dim);
        for (x, _) in items {
            for t in 0..t_max {
                let row = x.row(t.min(x.nrows() - 1));
                data.extend(row.iter().copied());
            }
        }
        let dev = Device::Cpu;
        let x = Tensor::from_vec(data, (items.len(), t_max, dim), &dev)?.to_dtype(dtype)?;
        Ok(Self {
            x,
            frame_mask: length_mask(&lengths, t_max, dtype, &dev)?,
            code_mask: length_mask(&code_lengths, t_y, dtype, &dev)?,
            speakers: items.iter().map(|(_, s)| *s).collect(),
            lengths,
            code_lengths,
        })
    }
}

pub struct LossBreakdown {
    pub recon: Tensor,
    pub commit: Tensor,
    pub total: Tensor,
}

/// Reconstruction MSE plus `gamma` times the commitment term.
///
/// `e_c` is detached here, so the commitment term only pulls on whatever
/// produced `z`. Masks are `(B, T)` and `(B, T_Y)`; `None` means all valid.
pub fn vqvae_loss(
    x: &Tensor,
    x_hat: &Tensor,
    z: &Tensor,
    e_c: &Tensor,
    frame_mask: Option<&Tensor>,
    code_mask: Option<&Tensor>,
    gamma: f64,
) -> Result<LossBreakdown> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("x {:?} vs reconstruction {:?}", x.dims(), x_hat.dims())));
    }
    if z.dims() != e_c.dims() {
        return Err(Error::Shape(format!("z {:?} vs codes {:?}", z.dims(), e_c.dims())));
    }
    let (b, t, d) = x.dims3()?;
    let (_, t_y, _) = z.dims3()?;
    let ones = |n| Tensor::ones((b, n), x.dtype(), x.device());
    let fm = match frame_mask {
        Some(m) => m.clone(),
        None => ones(t)?,
    };
    let cm = match code_mask {
        Some(m) => m.clone(),
        None => ones(t_y)?,
    };
    let sq = (x - x_hat)?.sqr()?.sum(2)?; // (B, T)
    let recon = ((sq * &fm)?.sum_all()? / (scalar(&fm.sum_all()?)?.max(1.0) * d as f64))?;
    let dist = (z - e_c.detach())?.sqr()?.sum(2)?; // (B, T_Y)
    let commit = ((dist * &cm)?.sum_all()? / scalar(&cm.sum_all()?)?.max(1.0))?;
    let total = (&recon + (&commit * gamma)?)?;
    Ok(LossBreakdown { recon, commit, total })
}

pub struct TrainForward {
    /// `(B, T_Y, D_e)`, attached to the encoder graph.
    pub z: Tensor,
    /// Selected codebook rows, `(B, T_Y, D_e)`.
    pub e_c: Tensor,
    /// Decoder input `z + sg(e_c - z)`.
    pub q_st: Tensor,
    pub x_hat: Tensor,
    pub loss: LossBreakdown,
    /// Graph leaf holding the codebook for this step.
    pub codebook: Var,
    /// Codes per utterance, padding positions dropped.
    pub codes: Vec<Vec<usize>>,
    /// Valid encoder outputs stacked in utterance order, matching `codes`.
    pub valid_z: Array2<f64>,
}

pub struct VqVaeModel {
    pub config: VqVaeConfig,
    pub codebook: Codebook,
    /// False until the codebook has been seeded from encoder outputs.
    pub codebook_ready: bool,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    speaker_table: Tensor,
}

impl VqVaeModel {
    pub fn new(config: VqVaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&mut params, &config)?;
        let decoder = Decoder::new(&mut params, &config)?;
        let speaker_table = params.get(
            "speaker_table",
            &[config.num_speakers, config.speaker_dim],
            Init::Normal(0.1),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let vectors = Array2::from_shape_fn((config.codebook_size, config.code_dim), |_| normal.sample(&mut rng));
        let mut codebook = Codebook::new(vectors);
        if dtype == DType::F32 {
            codebook.round_to_f32();
        }
        Ok(Self {
            config,
            codebook,
            codebook_ready: false,
            params,
            encoder,
            decoder,
            speaker_table,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn decode_tensor(&self, q: &Tensor, speakers: &[usize]) -> Result<Tensor> {
        let spk = self.speaker_vectors(speakers)?;
        self.decoder.forward(q, &spk)
    }

    fn speaker_vectors(&self, speakers: &[usize]) -> Result<Tensor> {
        let l = self.config.num_speakers;
        if let Some(&bad) = speakers.iter().find(|&&s| s >= l) {
            return Err(Error::InvalidInput(format!("speaker {bad} out of range for {l} speakers")));
        }
        let ids: Vec<u32> = speakers.iter().map(|&s| s as u32).collect();
        let ids = Tensor::from_vec(ids, speakers.len(), self.params.device())?;
        Ok(self.speaker_table.index_select(&ids, 0)?)
    }

    fn to_tensor(&self, a: &Array2<f64>) -> Result<Tensor> {
        let (t, d) = a.dim();
        let data: Vec<f64> = a.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, t, d), self.params.device())?.to_dtype(self.dtype())?)
    }

    fn from_tensor(t: &Tensor) -> Result<Array2<f64>> {
        let (_, r, c) = t.dims3()?;
        let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array2::from_shape_vec((r, c), v).expect("tensor shape matches"))
    }

    /// Continuous encoder output `z`, `ceil(T_X / r) x D_e`. The input is
    /// right-padded by repeating its last frame.
    pub fn vq_encode(&self, x: &FeatureSequence) -> Result<Array2<f64>> {
        if x.num_frames() == 0 {
            return Err(Error::InvalidInput("cannot encode an empty feature sequence".into()));
        }
        if x.dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "expected {}-dim frames, got {}",
                self.config.input_dim,
                x.dim()
            )));
        }
        let batch = PaddedBatch::new(&[(&x.frames, 0)], self.config.time_reduction, self.dtype())?;
        Self::from_tensor(&self.encoder.forward(&batch.x)?)
    }

    /// Decodes `T_Y x D_e` vectors to `T_Y * r` frames for one speaker.
    pub fn vq_decode(&self, q: &Array2<f64>, speaker: usize) -> Result<FeatureSequence> {
        if q.ncols() != self.config.code_dim {
            return Err(Error::Shape(format!(
                "expected {}-dim code vectors, got {}",
                self.config.code_dim,
                q.ncols()
            )));
        }
        if q.nrows() == 0 {
            return Err(Error::InvalidInput("cannot decode an empty code sequence".into()));
        }
        let y = self.decode_tensor(&self.to_tensor(q)?, &[speaker])?;
        FeatureSequence::new(Self::from_tensor(&y)?, FeatureKind::Mfcc39, 10.0)
    }

    pub fn extract_codes(&self, x: &FeatureSequence) -> Result<Vec<usize>> {
        let z = self.vq_encode(x)?;
        Ok(self.codebook.quantize(&z, false)?.codes)
    }

    /// Encode, quantise, decode and score a batch with the straight-through
    /// estimator in place.
    pub fn forward_train(&self, batch: &PaddedBatch) -> Result<TrainForward> {
        let cfg = &self.config;
        let z = self.encoder.forward(&batch.x)?;
        let (b, t_y, d_e) = z.dims3()?;
        let z_host = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let z_all = Array2::from_shape_vec((b * t_y, d_e), z_host).expect("encoder output shape");
        if z_all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: 0,
                detail: "encoder produced non-finite outputs".into(),
            });
        }
        let flat_codes = self.codebook.assign(z_all.view())?;
        let mut codes = Vec::with_capacity(b);
        let mut valid_rows = Vec::new();
        for (i, &n) in batch.code_lengths.iter().enumerate() {
            codes.push(flat_codes[i * t_y..i * t_y + n].to_vec());
            valid_rows.extend(i * t_y..i * t_y + n);
        }
        let valid_z = z_all.select(ndarray::Axis(0), &valid_rows);

        let dev = self.params.device();
        let cb_data: Vec<f64> = self.codebook.vectors.iter().copied().collect();
        let table = Tensor::from_vec(cb_data, self.codebook.vectors.dim(), dev)?.to_dtype(self.dtype())?;
        let codebook = Var::from_tensor(&table)?;
        let ids: Vec<u32> = flat_codes.iter().map(|&c| c as u32).collect();
        let ids = Tensor::from_vec(ids, b * t_y, dev)?;
        let e_c = codebook.as_tensor().index_select(&ids, 0)?.reshape((b, t_y, d_e))?;
        let q_st = (&z + (&e_c - &z)?.detach())?;
        let x_hat = self.decode_tensor(&q_st, &batch.speakers)?;
        let loss = vqvae_loss(
            &batch.x,
            &x_hat,
            &z,
            &e_c,
            Some(&batch.frame_mask),
            Some(&batch.code_mask),
            cfg.gamma,
        )?;
        Ok(TrainForward {
            z,
            e_c,
            q_st,
            x_hat,
            loss,
            codebook,
            codes,
            valid_z,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: TensorMap = self.params.to_flat()?;
        let (k, d) = self.codebook.vectors.dim();
        let f = |v: &f64| *v as f32;
        tensors.insert("codebook.vectors".into(), (vec![k, d], self.codebook.vectors.iter().map(f).collect()));
        tensors.insert("codebook.ema_counts".into(), (vec![k], self.codebook.ema_counts.iter().map(f).collect()));
        tensors.insert("codebook.ema_sums".into(), (vec![k, d], self.codebook.ema_sums.iter().map(f).collect()));
        tensors.insert("codebook.ready".into(), (vec![1], vec![self.codebook_ready as u8 as f32]));
        Ok(Checkpoint {
            kind: ModelKind::VqVae,
            config_json: serde_json::to_string(&self.config)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(ModelKind::VqVae)?;
        let config: VqVaeConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut model = Self::new(config, 0, dtype)?;
        let mut tensors = ckpt.tensors.clone();
        let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let (d, v) = tensors
                .remove(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            if d != dims {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name}: stored shape {d:?}, model expects {dims:?}"
                )));
            }
            Ok(v.into_iter().map(f64::from).collect())
        };
        let (k, d) = model.codebook.vectors.dim();
        let vectors = Array2::from_shape_vec((k, d), take("codebook.vectors", &[k, d])?).expect("checked shape");
        let sums = Array2::from_shape_vec((k, d), take("codebook.ema_sums", &[k, d])?).expect("checked shape");
        let counts = take("codebook.ema_counts", &[k])?;
        let ready = take("codebook.ready", &[1])?[0] != 0.0;
        model.codebook = Codebook {
            vectors,
            ema_counts: counts.into(),
            ema_sums: sums,
        };
        model.codebook_ready = ready;
        model.params.load_flat(&tensors)?;
        Ok(model)
    }

    /// Loads a checkpoint; when `expected` is given its architecture fields
    /// must match the stored config.
    pub fn load(path: &Path, expected: Option<&VqVaeConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let model = Self::from_checkpoint(&ckpt, DType::F32)?;
        if let Some(e) = expected {
            let s = &model.config;
            let pairs = [
                ("K", e.codebook_size, s.codebook_size),
                ("D_e", e.code_dim, s.code_dim),
                ("time_reduction", e.time_reduction, s.time_reduction),
                ("L", e.num_speakers, s.num_speakers),
                ("D_v", e.speaker_dim, s.speaker_dim),
                ("channels", e.channels, s.channels),
            ];
            for (name, want, got) in pairs {
                if want != got {
                    return Err(Error::CheckpointMismatch(format!(
                        "{}: {name} is {got} in the checkpoint but {want} in the config",
                        path.display()
                    )));
                }
            }
        }
        Ok(model)
    }
}
