use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::stft::{istft, stft};
use super::{FeatureConfig, FeatureSequence, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence of the returned waveform.
    pub spectral_convergence: f64,
    /// `history[k]` is the spectral convergence after `k` phase updates.
    pub history: Vec<f64>,
}

/// `||(|STFT(w)| - mag)||_F / ||mag||_F`; zero when `mag` is all zeros and
/// the waveform reproduces it.
pub fn spectral_convergence(samples: &[f64], mag: &Array2<f64>, cfg: &FeatureConfig) -> Result<f64> {
    let est = stft(samples, cfg)?.magnitude();
    sc_between(&est, mag)
}

fn sc_between(est: &Array2<f64>, mag: &Array2<f64>) -> Result<f64> {
    if est.dim() != mag.dim() {
        return Err(Error::Shape(format!(
            "re-analysed spectrogram {:?} vs target {:?}",
            est.dim(),
            mag.dim()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(est).and(mag).for_each(|e, m| {
        num += (e - m) * (e - m);
        den += m * m;
    });
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// Starting phase for Griffin-Lim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    /// All phases zero; zero iterations then give the plain inverse of `mag`.
    Zero,
    /// Each bin follows the nearest spectral peak: its phase advances by the
    /// peak's interpolated frequency times the hop, frame to frame, and is
    /// referenced to the window centre.
    #[default]
    PhaseAdvance,
}

/// Phase-vocoder style initial phases for a `T x bins` magnitude.
pub fn phase_advance_init(mag: &Array2<f64>, cfg: &FeatureConfig) -> Array2<f64> {
    let (t_len, n_bins) = mag.dim();
    let n_fft = cfg.fft_size as f64;
    let hop = cfg.hop_length() as f64;
    let centre = (cfg.win_length() / 2) as f64;
    let mut phase = Array2::zeros((t_len, n_bins));
    let mut acc = vec![0.0; n_bins];
    let mut freq = vec![0.0; n_bins];
    for t in 0..t_len {
        let row = mag.row(t);
        let peaks: Vec<usize> = (1..n_bins.saturating_sub(1))
            .filter(|&k| row[k] > 0.0 && row[k] > row[k - 1] && row[k] >= row[k + 1])
            .collect();
        if peaks.is_empty() {
            for (k, f) in freq.iter_mut().enumerate() {
                *f = k as f64 / n_fft;
            }
        } else {
            let mut p = 0;
            for (k, f) in freq.iter_mut().enumerate() {
                while p + 1 < peaks.len() && peaks[p + 1].abs_diff(k) < peaks[p].abs_diff(k) {
                    p += 1;
                }
                let c = peaks[p];
                // parabolic interpolation on log magnitude
                let ln = |i: usize| row[i].max(1e-300).ln();
                let (a, b, d) = (ln(c - 1), ln(c), ln(c + 1));
                let den = a - 2.0 * b + d;
                let offset = if den.abs() > 1e-12 { (0.5 * (a - d) / den).clamp(-0.5, 0.5) } else { 0.0 };
                *f = (c as f64 + offset) / n_fft;
            }
        }
        for k in 0..n_bins {
            if t > 0 {
                acc[k] += TAU * freq[k] * hop;
            }
            phase[[t, k]] = acc[k] + TAU * (freq[k] - k as f64 / n_fft) * centre;
        }
    }
    phase
}

/// Phase retrieval by alternating projections from the default start.
pub fn griffin_lim(mag: &FeatureSequence, iters: usize, cfg: &FeatureConfig) -> Result<GriffinLimOutput> {
    griffin_lim_with(mag, iters, cfg, PhaseInit::default())
}

pub fn griffin_lim_with(
    mag: &FeatureSequence,
    iters: usize,
    cfg: &FeatureConfig,
    init: PhaseInit,
) -> Result<GriffinLimOutput> {
    let mag = &mag.frames;
    if mag.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("magnitude contains NaN".into()));
    }
    if mag.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "magnitude must be finite and non-negative".into(),
        ));
    }
    if mag.ncols() != cfg.n_bins() {
        return Err(Error::Shape(format!(
            "expected {} bins, got {}",
            cfg.n_bins(),
            mag.ncols()
        )));
    }
    if mag.nrows() == 0 {
        return Err(Error::InvalidInput("empty magnitude spectrogram".into()));
    }
    // Without centring, the iSTFT output covers every frame exactly, so
    // re-analysis yields the same frame count.
    let len = if cfg.center {
        (mag.nrows() - 1) * cfg.hop_length()
    } else {
        (mag.nrows() - 1) * cfg.hop_length() + cfg.win_length()
    };

    let mut spec: Array2<Complex64> = match init {
        PhaseInit::Zero => mag.mapv(|m| Complex64::new(m, 0.0)),
        PhaseInit::PhaseAdvance => {
            let phase = phase_advance_init(mag, cfg);
            Zip::from(mag).and(&phase).map_collect(|&m, &p| Complex64::from_polar(m, p))
        }
    };
    let mut samples = istft(&spec, cfg, Some(len))?;
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let est = stft(&samples, cfg)?;
        history.push(sc_between(&est.magnitude(), mag)?);
        Zip::from(&mut spec)
            .and(&est.bins)
            .and(mag)
            .for_each(|s, e, m| {
                let n = e.norm();
                *s = if n > 0.0 {
                    e * (m / n)
                } else {
                    Complex64::new(*m, 0.0)
                };
            });
        samples = istft(&spec, cfg, Some(len))?;
    }
    let sc = spectral_convergence(&samples, mag, cfg)?;
    history.push(sc);
    Ok(GriffinLimOutput {
        waveform: Waveform {
            samples,
            sample_rate: cfg.sample_rate,
        },
        spectral_convergence: sc,
        history,
    })
}
