//! Deterministic DSP front-end.
//!
//! Waveforms become either 39-dim MFCC (13 cepstra plus first and second
//! order deltas) or 1025-bin linear magnitude spectrograms; magnitude
//! spectrograms go back to audio through Griffin-Lim phase retrieval.
//! Everything here is pure: identical input and config give bit-identical
//! output.

mod griffin_lim;
mod mfcc;
mod stats;
mod stft;

pub use griffin_lim::{
    griffin_lim, griffin_lim_with, phase_advance_init, spectral_convergence, GriffinLimOutput, PhaseInit,
};
pub use mfcc::{compute_deltas, compute_mfcc, dct_ortho, log_mel, mel_filterbank};
pub use stats::CorpusStats;
pub use stft::{compute_linear_spectrogram, hann_window, istft, stft, Stft};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub delta_window: usize,
    pub log_floor: f64,
    /// Reflect-pad by half a window on both sides before framing.
    pub center: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 2048,
            n_mels: 40,
            n_mfcc: 13,
            delta_window: 2,
            log_floor: 1e-10,
            center: false,
        }
    }
}

impl FeatureConfig {
    pub fn win_length(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.win_length();
        let hop = self.hop_length();
        if self.sample_rate == 0 || win == 0 || hop == 0 {
            return Err(Error::Config(
                "sample rate, window and hop must be positive".into(),
            ));
        }
        if self.fft_size < win {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than the {}-sample window",
                self.fft_size, win
            )));
        }
        if hop > win {
            return Err(Error::Config(format!(
                "hop {hop} exceeds window {win}"
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "n_mfcc must be in 1..={}, got {}",
                self.n_mels, self.n_mfcc
            )));
        }
        if self.delta_window == 0 {
            return Err(Error::Config("delta_window must be >= 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Mono audio. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::UtteranceTooShort {
                samples: 0,
                window: 1,
            });
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc39,
    Linear1025,
    Mel,
    /// Anything else stored in the tensor container (stats, raw matrices).
    Raw,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Raw => 0,
            FeatureKind::Mfcc39 => 1,
            FeatureKind::Linear1025 => 2,
            FeatureKind::Mel => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Raw),
            1 => Some(FeatureKind::Mfcc39),
            2 => Some(FeatureKind::Linear1025),
            3 => Some(FeatureKind::Mel),
            _ => None,
        }
    }
}

/// Time-major feature matrix (`T x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub kind: FeatureKind,
    pub frame_hop_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, kind: FeatureKind, frame_hop_ms: f64) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature frames contain non-finite values".into()));
        }
        Ok(Self {
            frames,
            kind,
            frame_hop_ms,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Number of frames produced for `len` samples under `cfg`.
pub fn frame_count(len: usize, cfg: &FeatureConfig) -> Result<usize> {
    let win = cfg.win_length();
    let hop = cfg.hop_length();
    let len = if cfg.center { len + 2 * (win / 2) } else { len };
    if len < win {
        return Err(Error::UtteranceTooShort {
            samples: len,
            window: win,
        });
    }
    Ok((len - win) / hop + 1)
}
