use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{frame_count, FeatureConfig, FeatureKind, FeatureSequence, Waveform};
use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex STFT, `T x (fft_size/2 + 1)`.
#[derive(Debug, Clone)]
pub struct Stft {
    pub bins: Array2<Complex64>,
    /// Number of samples in the analysed signal (before centre padding).
    pub signal_len: usize,
}

impl Stft {
    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    let reflect = |i: isize| -> f64 {
        if n == 1 {
            return samples[0];
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        samples[j as usize]
    };
    for i in -(pad as isize)..(n + pad) as isize {
        out.push(reflect(i));
    }
    out
}

pub fn stft(samples: &[f64], cfg: &FeatureConfig) -> Result<Stft> {
    cfg.validate()?;
    let win = cfg.win_length();
    let hop = cfg.hop_length();
    let n_fft = cfg.fft_size;
    let n_frames = frame_count(samples.len(), cfg)?;
    let padded;
    let signal: &[f64] = if cfg.center {
        padded = reflect_pad(samples, win / 2);
        &padded
    } else {
        samples
    };

    let window = hann_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = cfg.n_bins();
    let mut bins = Array2::<Complex64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex64::new(signal[start + i] * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            bins[[t, k]] = buf[k];
        }
    }
    Ok(Stft {
        bins,
        signal_len: samples.len(),
    })
}

/// Least-squares inverse STFT (window-squared normalised overlap-add).
///
/// Exact inverse of [`stft`] wherever the summed squared window is non-zero,
/// which covers every sample except the very first when hop < window.
/// `length` trims or zero-extends the output; by default the output covers
/// all frames.
pub fn istft(bins: &Array2<Complex64>, cfg: &FeatureConfig, length: Option<usize>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let win = cfg.win_length();
    let hop = cfg.hop_length();
    let n_fft = cfg.fft_size;
    let n_bins = cfg.n_bins();
    if bins.ncols() != n_bins {
        return Err(Error::Shape(format!(
            "expected {} frequency bins, got {}",
            n_bins,
            bins.ncols()
        )));
    }
    let n_frames = bins.nrows();
    let full_len = if n_frames == 0 { 0 } else { (n_frames - 1) * hop + win };
    let window = hann_window(win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);

    let mut acc = vec![0.0; full_len];
    let mut norm = vec![0.0; full_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        for k in 0..n_bins {
            buf[k] = bins[[t, k]];
        }
        for k in n_bins..n_fft {
            buf[k] = bins[[t, n_fft - k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for (i, w) in window.iter().enumerate() {
            acc[start + i] += buf[i].re / n_fft as f64 * w;
            norm[start + i] += w * w;
        }
    }
    let mut out: Vec<f64> = acc
        .iter()
        .zip(&norm)
        .map(|(a, n)| if *n > 1e-8 { a / n } else { 0.0 })
        .collect();

    if cfg.center {
        let pad = win / 2;
        out = if out.len() > pad { out.split_off(pad) } else { Vec::new() };
    }
    if let Some(len) = length {
        out.resize(len, 0.0);
    }
    Ok(out)
}

pub fn compute_linear_spectrogram(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    check_rate(w, cfg)?;
    let spec = stft(&w.samples, cfg)?;
    FeatureSequence::new(spec.magnitude(), FeatureKind::Linear1025, cfg.hop_ms)
}

pub(crate) fn check_rate(w: &Waveform, cfg: &FeatureConfig) -> Result<()> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "waveform sample rate {} does not match config {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    w.validate()
}
