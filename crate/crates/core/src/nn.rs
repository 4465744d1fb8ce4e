//! Small neural-network toolkit on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialised from a seeded ChaCha stream, so a given seed always produces
//! the same model. Layers keep clones of the underlying tensors; optimizer
//! updates through the `Var`s are visible to them.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b)
    Uniform(f64),
    Normal(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_owned(), var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `(name, dims, f32 data)` triples;
    /// names and shapes must match exactly.
    pub fn load_flat(&self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::CheckpointMismatch(format!("unexpected tensor {name}")));
            }
        }
        for (name, var) in &self.vars {
            let (dims, data) = tensors
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            if dims.as_slice() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name}: stored shape {:?}, model expects {:?}",
                    dims,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let data = var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            out.insert(name.clone(), (var.dims().to_vec(), data));
        }
        Ok(out)
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Applies `f` to a `(.., in)` tensor by flattening leading dims.
fn on_last_dim(x: &Tensor, out_dim: usize, f: impl Fn(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Shape("scalar input to layer".into()))?;
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = f(&x.reshape((lead, last))?)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(out_dim);
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let b = fan_in_bound(in_dim);
        let weight = ps.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(b))?;
        let bias = ps.get(&format!("{name}.bias"), &[out_dim], Init::Uniform(b))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let b = fan_in_bound(in_dim);
        let weight = ps.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(b))?;
        Ok(Self { weight, bias: None })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.t()?;
        let out = self.out_dim();
        on_last_dim(x, out, |x2| {
            let y = x2.matmul(&wt)?;
            match &self.bias {
                Some(b) => y.broadcast_add(b),
                None => Ok(y),
            }
        })
    }
}

/// Stride-1 convolution with "same" zero padding over `(B, C, T)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    kernel: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("same-padded conv needs an odd kernel, got {kernel}")));
        }
        let b = fan_in_bound(in_ch * kernel);
        let weight = ps.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel], Init::Uniform(b))?;
        let bias = ps.get(&format!("{name}.bias"), &[out_ch], Init::Uniform(b))?;
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.kernel == 1 {
            // (B, C, T) -> (B, T, C) -> linear -> back
            let w = self.weight.squeeze(2)?;
            let out_ch = w.dims()[0];
            let xt = x.transpose(1, 2)?.contiguous()?;
            on_last_dim(&xt, out_ch, |x2| x2.matmul(&w.t()?))?.transpose(1, 2)?
        } else {
            // candle's conv1d backward underflows when the input is shorter
            // than its own padding, so pad explicitly
            let pad = (self.kernel - 1) / 2;
            x.pad_with_zeros(2, pad, pad)?.contiguous()?.conv1d(&self.weight, 0, 1, 1, 1)?
        };
        let out_ch = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1))?)?)
    }
}

/// Batch normalisation over `(B, C, T)` with a validity mask `(B, 1, T)`.
///
/// Statistics come from the valid positions only. Running estimates are
/// updated in training mode and used in inference mode.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running: Mutex<(Vec<f64>, Vec<f64>)>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running: Mutex::new((vec![0.0; channels], vec![1.0; channels])),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels();
        let (mean, var) = if train {
            let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
            let xm = x.broadcast_mul(mask)?;
            let mean = (xm.sum((0, 2))? / count)?; // (C)
            let centred = x.broadcast_sub(&mean.reshape((1, c, 1))?)?;
            let var = (centred.sqr()?.broadcast_mul(mask)?.sum((0, 2))? / count)?;
            {
                let m64 = mean.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                let v64 = var.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                let mut running = self.running.lock().expect("running stats lock");
                // f32 models keep f32-representable statistics so checkpoints hold them exactly
                let round = |v: f64| if x.dtype() == DType::F32 { v as f32 as f64 } else { v };
                for i in 0..c {
                    running.0[i] = round((1.0 - self.momentum) * running.0[i] + self.momentum * m64[i]);
                    running.1[i] = round((1.0 - self.momentum) * running.1[i] + self.momentum * v64[i]);
                }
            }
            (mean, var)
        } else {
            let running = self.running.lock().expect("running stats lock");
            let dev = x.device();
            (
                Tensor::from_vec(running.0.clone(), c, dev)?.to_dtype(x.dtype())?,
                Tensor::from_vec(running.1.clone(), c, dev)?.to_dtype(x.dtype())?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (&self.gamma * inv)?.reshape((1, c, 1))?;
        let shift = self.beta.reshape((1, c, 1))?;
        let y = x
            .broadcast_sub(&mean.reshape((1, c, 1))?)?
            .broadcast_mul(&scale)?
            .broadcast_add(&shift)?;
        Ok(y)
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        self.running.lock().expect("running stats lock").clone()
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::CheckpointMismatch("batch-norm statistics length".into()));
        }
        *self.running.lock().expect("running stats lock") = (mean, var);
        Ok(())
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Single-direction LSTM; gate order i, f, g, o.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Linear,
    w_hh: Linear,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl Lstm {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: Linear::new(ps, &format!("{name}.ih"), in_dim, 4 * hidden)?,
            w_hh: Linear::no_bias(ps, &format!("{name}.hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, dtype: DType, dev: &Device) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), dtype, dev)?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection for a whole `(B, T, in)` sequence.
    pub fn project_inputs(&self, x: &Tensor) -> Result<Tensor> {
        self.w_ih.forward(x)
    }

    /// One step given an already projected input `(B, 4H)`.
    pub fn step_projected(&self, gx: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (gx + self.w_hh.forward(&state.h)?)?;
        let h = self.hidden;
        let i = sigmoid(&gates.narrow(1, 0, h)?)?;
        let f = sigmoid(&gates.narrow(1, h, h)?)?;
        let g = gates.narrow(1, 2 * h, h)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * h, h)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        self.step_projected(&self.w_ih.forward(x)?, state)
    }

    /// Runs over `(B, T, in)` with a `(B, T)` validity mask. Invalid steps
    /// leave the state untouched and emit zeros, so a right-padded sequence
    /// behaves exactly like the unpadded one on its valid prefix (forward)
    /// or suffix start (reverse).
    pub fn run(&self, x: &Tensor, mask: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t_len, _) = x.dims3()?;
        let gx = self.project_inputs(x)?;
        let mut state = self.zero_state(b, x.dtype(), x.device())?;
        let mut outs: Vec<Option<Tensor>> = vec![None; t_len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let m = mask.narrow(1, t, 1)?; // (B, 1)
            let next = self.step_projected(&gx.narrow(1, t, 1)?.squeeze(1)?, &state)?;
            let keep = m.affine(-1.0, 1.0)?;
            let h = (next.h.broadcast_mul(&m)? + state.h.broadcast_mul(&keep)?)?;
            let c = (next.c.broadcast_mul(&m)? + state.c.broadcast_mul(&keep)?)?;
            outs[t] = Some(h.broadcast_mul(&m)?);
            state = LstmState { h, c };
        }
        let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// Bidirectional LSTM layer; output `(B, T, 2H)`, forward half first.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl BiLstm {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(ps, &format!("{name}.fwd"), in_dim, hidden)?,
            bwd: Lstm::new(ps, &format!("{name}.bwd"), in_dim, hidden)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let f = self.fwd.run(x, mask, false)?;
        let b = self.bwd.run(x, mask, true)?;
        Ok(Tensor::cat(&[f, b], D::Minus1)?)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, lr: f64, clip: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
            clip,
        })
    }

    /// Backpropagates `loss`, clips, and applies one update. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(max) = self.clip {
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Builds a `(B, T)` mask of ones on valid positions.
pub fn length_mask(lengths: &[usize], t_max: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; lengths.len() * t_max];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            m[b * t_max + t] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (lengths.len(), t_max), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let mut a = ParamStore::new(3, DType::F64);
        let mut b = ParamStore::new(3, DType::F64);
        let x = Linear::new(&mut a, "l", 4, 3).unwrap();
        let y = Linear::new(&mut b, "l", 4, 3).unwrap();
        assert_eq!(
            x.weight.to_vec2::<f64>().unwrap(),
            y.weight.to_vec2::<f64>().unwrap()
        );
        assert!(a.get("l.weight", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn padded_lstm_matches_unpadded() {
        let mut ps = ParamStore::new(1, DType::F64);
        let lstm = BiLstm::new(&mut ps, "b", 3, 4).unwrap();
        let dev = Device::Cpu;
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let short = Tensor::from_vec(x.clone(), (1, 5, 3), &dev).unwrap();
        let mut padded_data = x.clone();
        padded_data.extend([9.0; 6]);
        let padded = Tensor::from_vec(padded_data, (1, 7, 3), &dev).unwrap();
        let m5 = length_mask(&[5], 5, DType::F64, &dev).unwrap();
        let m7 = length_mask(&[5], 7, DType::F64, &dev).unwrap();
        let a = lstm.forward(&short, &m5).unwrap().to_vec3::<f64>().unwrap();
        let b = lstm.forward(&padded, &m7).unwrap().to_vec3::<f64>().unwrap();
        for t in 0..5 {
            for d in 0..8 {
                assert!((a[0][t][d] - b[0][t][d]).abs() < 1e-12);
            }
        }
        assert!(b[0][5].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_same_padding_keeps_length() {
        let mut ps = ParamStore::new(1, DType::F32);
        let c3 = Conv1d::new(&mut ps, "c3", 2, 5, 3).unwrap();
        let c1 = Conv1d::new(&mut ps, "c1", 2, 5, 1).unwrap();
        let x = Tensor::ones((2, 2, 9), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c3.forward(&x).unwrap().dims(), &[2, 5, 9]);
        assert_eq!(c1.forward(&x).unwrap().dims(), &[2, 5, 9]);
        assert!(Conv1d::new(&mut ps, "c2", 2, 5, 2).is_err());
    }

    #[test]
    fn conv_backward_on_sequences_shorter_than_kernel() {
        let mut ps = ParamStore::new(1, DType::F64);
        let c5 = Conv1d::new(&mut ps, "c5", 2, 3, 5).unwrap();
        for t in 1..4 {
            let x = Var::from_tensor(&Tensor::ones((1, 2, t), DType::F64, &Device::Cpu).unwrap()).unwrap();
            let y = c5.forward(x.as_tensor()).unwrap();
            assert_eq!(y.dims(), &[1, 3, t]);
            let g = y.sum_all().unwrap().backward().unwrap();
            assert_eq!(g.get(x.as_tensor()).unwrap().dims(), &[1, 2, t]);
            assert_eq!(g.get(&c5.weight).unwrap().dims(), &[3, 2, 5]);
        }
    }

    #[test]
    fn masked_batch_norm_ignores_padding() {
        let mut ps = ParamStore::new(1, DType::F64);
        let bn = BatchNorm1d::new(&mut ps, "bn", 1).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![1.0, 3.0, 100.0], (1, 1, 3), &dev).unwrap();
        let m = Tensor::from_vec(vec![1.0, 1.0, 0.0], (1, 1, 3), &dev).unwrap();
        let y = bn.forward(&x, &m, true).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
        let (rm, rv) = bn.running_stats();
        assert!((rm[0] - 0.2).abs() < 1e-12);
        assert!((rv[0] - 1.0).abs() < 1e-12);
    }
}
