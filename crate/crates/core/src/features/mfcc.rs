use ndarray::{s, Array2};

use super::stft::{check_rate, stft};
use super::{FeatureConfig, FeatureKind, FeatureSequence, Waveform};
use crate::error::Result;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters spanning 0 Hz to Nyquist, `n_mels x n_bins`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let n_bins = cfg.n_bins();
    let sr = cfg.sample_rate as f64;
    let max_mel = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sr / cfg.fft_size as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II basis, `n_out x n_in`.
pub fn dct_ortho(n_in: usize, n_out: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

/// `ln(max(mel energy, floor))` per frame, `T x n_mels`.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    check_rate(w, cfg)?;
    let mag = stft(&w.samples, cfg)?.magnitude();
    let fb = mel_filterbank(cfg);
    let mel = mag.dot(&fb.t());
    Ok(mel.mapv(|v| v.max(cfg.log_floor).ln()))
}

/// Regression deltas over `+-n` frames with edge replication.
///
/// `d_t = sum_{k=1..n} k (c_{t+k} - c_{t-k}) / (2 sum_{k=1..n} k^2)`
pub fn compute_deltas(seq: &Array2<f64>, n: usize) -> Array2<f64> {
    let (t_len, dim) = seq.dim();
    let mut out = Array2::zeros((t_len, dim));
    if t_len == 0 || n == 0 {
        return out;
    }
    let denom = 2.0 * (1..=n).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |i: isize| i.clamp(0, t_len as isize - 1) as usize;
    for t in 0..t_len {
        for k in 1..=n {
            let fwd = seq.row(clamp(t as isize + k as isize));
            let bwd = seq.row(clamp(t as isize - k as isize));
            let mut row = out.row_mut(t);
            for d in 0..dim {
                row[d] += k as f64 * (fwd[d] - bwd[d]);
            }
        }
        out.row_mut(t).mapv_inplace(|v| v / denom);
    }
    out
}

/// Cepstra `0..n_mfcc` with deltas and delta-deltas appended.
pub fn compute_mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let lm = log_mel(w, cfg)?;
    let dct = dct_ortho(cfg.n_mels, cfg.n_mfcc);
    let ceps = lm.dot(&dct.t());
    let d1 = compute_deltas(&ceps, cfg.delta_window);
    let d2 = compute_deltas(&d1, cfg.delta_window);
    let t_len = ceps.nrows();
    let c = cfg.n_mfcc;
    let mut frames = Array2::zeros((t_len, 3 * c));
    frames.slice_mut(s![.., 0..c]).assign(&ceps);
    frames.slice_mut(s![.., c..2 * c]).assign(&d1);
    frames.slice_mut(s![.., 2 * c..3 * c]).assign(&d2);
    FeatureSequence::new(frames, FeatureKind::Mfcc39, cfg.hop_ms)
}
