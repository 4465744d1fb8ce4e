use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;

use super::{AttentionKind, S2sConfig};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{length_mask, BiLstm, Init, Linear, Lstm, LstmState, ParamStore};

/// Additive offset that removes a position from a softmax.
const MASKED: f64 = -1e9;

enum Attention {
    Mlp { enc: Linear, dec: Linear, v: Linear },
    Dot { proj: Linear },
}

/// Encoder output for a padded batch.
pub struct EncoderStates {
    /// `(B, S', M)`; zero at padded positions.
    pub states: Tensor,
    /// `(B, S')`
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    /// Encoder half of the additive score, computed once per utterance.
    keys: Option<Tensor>,
}

pub struct AttentionStep {
    /// `(B, S')`, zero on masked positions.
    pub weights: Tensor,
    /// `(B, M)`
    pub context: Tensor,
}

#[derive(Clone)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// Context vector from the previous step, fed back as input.
    pub context: Tensor,
}

pub struct StepOutput {
    /// `(B, V)` with BOS pushed to a large negative value.
    pub logits: Tensor,
    pub log_probs: Tensor,
    pub state: DecoderState,
    pub attention: AttentionStep,
}

/// Source features and target codes, right-padded.
pub struct S2sBatch {
    /// `(B, S, D)`
    pub x: Tensor,
    pub src_lengths: Vec<usize>,
    /// Decoder inputs per utterance: BOS followed by the codes.
    pub dec_in: Vec<Vec<usize>>,
    /// Prediction targets per utterance: the codes followed by EOS.
    pub dec_out: Vec<Vec<usize>>,
}

impl S2sBatch {
    pub fn new(pairs: &[(&Array2<f64>, &[usize])], cfg: &S2sConfig, dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let dim = cfg.input_dim;
        let s_max = pairs.iter().map(|(x, _)| x.nrows()).max().unwrap_or(0);
        let mut data = vec![0.0f64; pairs.len() * s_max * dim];
        let mut src_lengths = Vec::with_capacity(pairs.len());
        let mut dec_in = Vec::with_capacity(pairs.len());
        let mut dec_out = Vec::with_capacity(pairs.len());
        for (b, (x, y)) in pairs.iter().enumerate() {
            if x.nrows() == 0 {
                return Err(Error::InvalidInput("empty source sequence".into()));
            }
            if x.ncols() != dim {
                return Err(Error::Shape(format!("expected {dim}-dim source frames, got {}", x.ncols())));
            }
            if let Some(&bad) = y.iter().find(|&&t| t >= cfg.codebook_size) {
                return Err(Error::TokenOutOfRange {
                    token: bad,
                    vocab: cfg.codebook_size,
                });
            }
            for (t, row) in x.rows().into_iter().enumerate() {
                let off = (b * s_max + t) * dim;
                data[off..off + dim].iter_mut().zip(row.iter()).for_each(|(d, v)| *d = *v);
            }
            src_lengths.push(x.nrows());
            let mut inp = vec![cfg.bos()];
            inp.extend_from_slice(y);
            let mut out = y.to_vec();
            out.push(cfg.eos());
            dec_in.push(inp);
            dec_out.push(out);
        }
        let x = Tensor::from_vec(data, (pairs.len(), s_max, dim), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            x,
            src_lengths,
            dec_in,
            dec_out,
        })
    }

    pub fn max_target_len(&self) -> usize {
        self.dec_out.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Mean over sequences of the per-sequence mean token NLL.
///
/// `logits` is `(B, T, V)`; `targets[b]` covers the first `targets[b].len()`
/// steps of row `b`, the rest is padding.
pub fn s2s_loss(logits: &Tensor, targets: &[Vec<usize>]) -> Result<Tensor> {
    let (b, t_max, v) = logits.dims3()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} target rows for batch of {b}", targets.len())));
    }
    let mut ids = vec![0u32; b * t_max];
    let mut weights = vec![0.0f64; b * t_max];
    for (i, tgt) in targets.iter().enumerate() {
        if tgt.is_empty() || tgt.len() > t_max {
            return Err(Error::Shape(format!(
                "target length {} does not fit {t_max} decoder steps",
                tgt.len()
            )));
        }
        for (t, &tok) in tgt.iter().enumerate() {
            if tok >= v {
                return Err(Error::TokenOutOfRange { token: tok, vocab: v });
            }
            ids[i * t_max + t] = tok as u32;
            weights[i * t_max + t] = 1.0 / (tgt.len() as f64 * b as f64);
        }
    }
    let dev = logits.device();
    let ids = Tensor::from_vec(ids, (b, t_max, 1), dev)?;
    let weights = Tensor::from_vec(weights, (b, t_max), dev)?.to_dtype(logits.dtype())?;
    let lp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = lp.gather(&ids, 2)?.squeeze(2)?;
    Ok((picked * weights)?.sum_all()?.neg()?)
}

/// Correct argmax predictions and number of scored steps.
pub fn token_accuracy(logits: &Tensor, targets: &[Vec<usize>]) -> Result<(usize, usize)> {
    let pred = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
    let mut correct = 0;
    let mut total = 0;
    for (row, tgt) in pred.iter().zip(targets) {
        for (p, &t) in row.iter().zip(tgt) {
            correct += (*p as usize == t) as usize;
            total += 1;
        }
    }
    Ok((correct, total))
}

pub struct S2sModel {
    pub config: S2sConfig,
    params: ParamStore,
    layers: Vec<BiLstm>,
    embed: Tensor,
    dec: Lstm,
    attention: Attention,
    combine: Linear,
    out: Linear,
    bos_mask: Tensor,
}

impl S2sModel {
    pub fn new(config: S2sConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let h = config.enc_hidden;
        let m = config.enc_dim();
        let n = config.dec_hidden;
        let v = config.vocab();
        let mut layers = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let in_dim = if l == 0 {
                config.input_dim
            } else {
                m * config.pyramid_factor
            };
            layers.push(BiLstm::new(&mut ps, &format!("enc.layer{l}"), in_dim, h)?);
        }
        let embed = ps.get("dec.embed", &[v, config.embed_dim], Init::Normal(0.1))?;
        let dec = Lstm::new(&mut ps, "dec.lstm", config.embed_dim + m, n)?;
        let attention = match config.attention {
            AttentionKind::Mlp => Attention::Mlp {
                enc: Linear::no_bias(&mut ps, "attn.enc", m, config.attention_dim)?,
                dec: Linear::new(&mut ps, "attn.dec", n, config.attention_dim)?,
                v: Linear::no_bias(&mut ps, "attn.v", config.attention_dim, 1)?,
            },
            AttentionKind::Dot => Attention::Dot {
                proj: Linear::no_bias(&mut ps, "attn.proj", n, m)?,
            },
        };
        let combine = Linear::new(&mut ps, "dec.combine", n + m, n)?;
        let out = Linear::new(&mut ps, "dec.out", n, v)?;
        let mut mask = vec![0.0f64; v];
        mask[config.bos()] = MASKED;
        let bos_mask = Tensor::from_vec(mask, (1, v), ps.device())?.to_dtype(dtype)?;
        Ok(Self {
            config,
            params: ps,
            layers,
            embed,
            dec,
            attention,
            combine,
            out,
            bos_mask,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Merges `factor` consecutive frames into one, zero-padding the tail.
    fn pyramid(x: &Tensor, factor: usize) -> Result<Tensor> {
        if factor == 1 {
            return Ok(x.clone());
        }
        let (b, t, c) = x.dims3()?;
        let t_out = t.div_ceil(factor);
        let x = if t_out * factor > t {
            let pad = Tensor::zeros((b, t_out * factor - t, c), x.dtype(), x.device())?;
            Tensor::cat(&[x, &pad], 1)?
        } else {
            x.clone()
        };
        Ok(x.reshape((b, t_out, factor * c))?)
    }

    /// Runs the pyramidal BiLSTM stack over a padded `(B, S, D)` batch.
    pub fn encode(&self, x: &Tensor, lengths: &[usize]) -> Result<EncoderStates> {
        let (b, s, _) = x.dims3()?;
        if lengths.len() != b {
            return Err(Error::Shape(format!("{} lengths for batch of {b}", lengths.len())));
        }
        if lengths.iter().any(|&l| l == 0 || l > s) {
            return Err(Error::InvalidInput("source lengths must lie in 1..=S".into()));
        }
        let dev = x.device();
        let mut lengths = lengths.to_vec();
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = Self::pyramid(&h, self.config.pyramid_factor)?;
                lengths = lengths.iter().map(|n| n.div_ceil(self.config.pyramid_factor)).collect();
            }
            let mask = length_mask(&lengths, h.dims()[1], h.dtype(), dev)?;
            h = layer.forward(&h, &mask)?;
        }
        let mask = length_mask(&lengths, h.dims()[1], h.dtype(), dev)?;
        let keys = match &self.attention {
            Attention::Mlp { enc, .. } => Some(enc.forward(&h)?),
            Attention::Dot { .. } => None,
        };
        Ok(EncoderStates {
            states: h,
            mask,
            lengths,
            keys,
        })
    }

    pub fn s2s_encode(&self, x: &FeatureSequence) -> Result<EncoderStates> {
        if x.num_frames() == 0 {
            return Err(Error::InvalidInput("cannot encode an empty source sequence".into()));
        }
        let (s, d) = x.frames.dim();
        if d != self.config.input_dim {
            return Err(Error::Shape(format!("expected {}-dim source frames, got {d}", self.config.input_dim)));
        }
        let data: Vec<f64> = x.frames.iter().copied().collect();
        let t = Tensor::from_vec(data, (1, s, d), self.params.device())?.to_dtype(self.dtype())?;
        self.encode(&t, &[s])
    }

    /// Softmax over unmasked encoder positions of the alignment scores.
    pub fn attention_step(&self, enc: &EncoderStates, h_dec: &Tensor) -> Result<AttentionStep> {
        if enc.lengths.contains(&0) {
            return Err(Error::InvalidInput("attention over a fully masked sequence".into()));
        }
        let scores = match &self.attention {
            Attention::Mlp { dec, v, .. } => {
                let keys = enc.keys.as_ref().expect("mlp attention keeps keys");
                let q = dec.forward(h_dec)?.unsqueeze(1)?;
                v.forward(&keys.broadcast_add(&q)?.tanh()?)?.squeeze(2)?
            }
            Attention::Dot { proj } => {
                let q = proj.forward(h_dec)?.unsqueeze(2)?;
                enc.states.matmul(&q)?.squeeze(2)?
            }
        };
        let offset = enc.mask.affine(-MASKED, MASKED)?;
        let weights = candle_nn::ops::softmax(&(scores + offset)?, D::Minus1)?;
        let context = weights.unsqueeze(1)?.matmul(&enc.states)?.squeeze(1)?;
        Ok(AttentionStep { weights, context })
    }

    pub fn initial_state(&self, batch: usize) -> Result<DecoderState> {
        let dev = self.params.device();
        Ok(DecoderState {
            lstm: self.dec.zero_state(batch, self.dtype(), dev)?,
            context: Tensor::zeros((batch, self.config.enc_dim()), self.dtype(), dev)?,
        })
    }

    /// One decoder step: embed the previous tokens, advance the LSTM on
    /// `[embedding; previous context]`, attend, then score the vocabulary.
    pub fn decoder_step(&self, enc: &EncoderStates, prev: &[usize], state: &DecoderState) -> Result<StepOutput> {
        let v = self.config.vocab();
        if let Some(&bad) = prev.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: v });
        }
        let ids: Vec<u32> = prev.iter().map(|&t| t as u32).collect();
        let ids = Tensor::from_vec(ids, prev.len(), self.params.device())?;
        let emb = self.embed.index_select(&ids, 0)?;
        let inp = Tensor::cat(&[&emb, &state.context], 1)?;
        let lstm = self.dec.step(&inp, &state.lstm)?;
        let attention = self.attention_step(enc, &lstm.h)?;
        let hidden = self
            .combine
            .forward(&Tensor::cat(&[&lstm.h, &attention.context], 1)?)?
            .tanh()?;
        let logits = self.out.forward(&hidden)?.broadcast_add(&self.bos_mask)?;
        let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        Ok(StepOutput {
            logits,
            log_probs,
            state: DecoderState {
                lstm,
                context: attention.context.clone(),
            },
            attention,
        })
    }

    /// Decoder logits `(B, T, V)` for a batch. Each step feeds the gold
    /// previous token with probability `teacher_forcing`, otherwise the
    /// model's own previous argmax; `coin` supplies uniform draws.
    pub fn forward_batch(
        &self,
        batch: &S2sBatch,
        teacher_forcing: f64,
        coin: &mut dyn FnMut() -> f64,
    ) -> Result<Tensor> {
        let enc = self.encode(&batch.x, &batch.src_lengths)?;
        let b = batch.dec_in.len();
        let t_max = batch.max_target_len();
        let mut state = self.initial_state(b)?;
        let mut prev: Vec<usize> = vec![self.config.bos(); b];
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let out = self.decoder_step(&enc, &prev, &state)?;
            if t + 1 < t_max {
                let own = if teacher_forcing < 1.0 {
                    Some(out.logits.argmax(D::Minus1)?.to_vec1::<u32>()?)
                } else {
                    None
                };
                for (i, p) in prev.iter_mut().enumerate() {
                    let gold = batch.dec_in[i].get(t + 1).copied().unwrap_or(self.config.eos());
                    *p = match &own {
                        Some(pred) if coin() >= teacher_forcing => pred[i] as usize,
                        _ => gold,
                    };
                }
            }
            state = out.state;
            steps.push(out.logits);
        }
        Ok(Tensor::stack(&steps, 1)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: ModelKind::S2s,
            config_json: serde_json::to_string(&self.config)?,
            tensors: self.params.to_flat()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(ModelKind::S2s)?;
        let config: S2sConfig = serde_json::from_str(&ckpt.config_json)?;
        let model = Self::new(config, 0, dtype)?;
        model.params.load_flat(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}
