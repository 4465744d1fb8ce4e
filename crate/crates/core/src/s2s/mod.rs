//! Attentional encoder-decoder from source-language MFCC frames to
//! target-language code sequences.
//!
//! Token ids `0..K` are codebook entries; `K` is BOS and `K + 1` is EOS.

mod decode;
mod model;
mod train;

pub use decode::Translation;
pub use model::{
    s2s_loss, token_accuracy, AttentionStep, DecoderState, EncoderStates, S2sBatch, S2sModel, StepOutput,
};
pub use train::{S2sMetrics, S2sTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// `w^T tanh(W1 h_s + W2 h_t + b)`
    Mlp,
    /// `h_s . (W h_t)`; the projection lets encoder and decoder widths differ.
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S2sConfig {
    /// Number of code tokens K; the vocabulary adds BOS and EOS.
    #[serde(rename = "K", alias = "codebook_size")]
    pub codebook_size: usize,
    pub input_dim: usize,
    pub enc_layers: usize,
    /// Per-direction LSTM width; encoder states are twice as wide.
    pub enc_hidden: usize,
    /// Time reduction between consecutive encoder layers.
    pub pyramid_factor: usize,
    pub dec_hidden: usize,
    pub embed_dim: usize,
    pub attention: AttentionKind,
    pub attention_dim: usize,
    pub max_decode_len: usize,
    pub beam: usize,
    pub teacher_forcing: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for S2sConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            input_dim: 39,
            enc_layers: 3,
            enc_hidden: 512,
            pyramid_factor: 2,
            dec_hidden: 512,
            embed_dim: 128,
            attention: AttentionKind::Mlp,
            attention_dim: 256,
            max_decode_len: 200,
            beam: 1,
            teacher_forcing: 1.0,
            learning_rate: 1e-4,
            grad_clip: 5.0,
            batch_size: 16,
            steps: 4000,
        }
    }
}

impl S2sConfig {
    pub fn vocab(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn bos(&self) -> usize {
        self.codebook_size
    }

    pub fn eos(&self) -> usize {
        self.codebook_size + 1
    }

    /// Encoder output width M.
    pub fn enc_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Encoder length for `s` input frames.
    pub fn encoded_len(&self, s: usize) -> usize {
        let mut n = s;
        for _ in 1..self.enc_layers {
            n = n.div_ceil(self.pyramid_factor);
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 {
            return Err(Error::Config("s2s needs at least one code token".into()));
        }
        if self.enc_layers == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("s2s widths and depth must be positive".into()));
        }
        if self.pyramid_factor == 0 {
            return Err(Error::Config("pyramid_factor must be >= 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be >= 1".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Config("teacher_forcing must be a probability".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let c = S2sConfig {
            codebook_size: 32,
            ..Default::default()
        };
        assert_eq!(c.vocab(), 34);
        assert_eq!(c.bos(), 32);
        assert_eq!(c.eos(), 33);
        c.validate().unwrap();
    }

    #[test]
    fn pyramid_lengths() {
        let c = S2sConfig {
            enc_layers: 2,
            ..Default::default()
        };
        assert_eq!(c.encoded_len(100), 50);
        assert_eq!(c.encoded_len(101), 51);
        let c3 = S2sConfig::default();
        assert_eq!(c3.encoded_len(100), 25);
        assert_eq!(c3.encoded_len(1), 1);
    }
}
