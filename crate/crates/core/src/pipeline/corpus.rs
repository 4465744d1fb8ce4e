//! Synthetic paired corpus: digit strings spoken as tone sequences in two
//! "languages" with disjoint pitch sets, different digit durations and
//! opposite digit order.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::io::write_wav;

pub const SAMPLE_RATE: u32 = 16_000;

const DIGIT_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// How one language renders a digit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneLanguage {
    /// Pitch of digit `d` is `base_hz * ratio^d`.
    pub base_hz: f64,
    pub ratio: f64,
    pub tone_ms: f64,
    pub gap_ms: f64,
    /// Digits are spoken last to first.
    pub reversed: bool,
}

pub const SOURCE_LANGUAGE: ToneLanguage = ToneLanguage {
    base_hz: 200.0,
    ratio: 1.15,
    tone_ms: 120.0,
    gap_ms: 30.0,
    reversed: false,
};

/// 240 ms per digit, a whole number of 10 ms hops.
pub const TARGET_LANGUAGE: ToneLanguage = ToneLanguage {
    base_hz: 1000.0,
    ratio: 1.18,
    tone_ms: 200.0,
    gap_ms: 40.0,
    reversed: true,
};

const AMPLITUDE: f64 = 0.5;
const FADE_MS: f64 = 5.0;

impl ToneLanguage {
    pub fn pitch(&self, digit: u8) -> f64 {
        self.base_hz * self.ratio.powi(digit as i32)
    }

    /// Digit order as spoken.
    pub fn spoken_order(&self, message: &[u8]) -> Vec<u8> {
        let mut d = message.to_vec();
        if self.reversed {
            d.reverse();
        }
        d
    }

    /// Every digit restarts at zero phase, so repeated digits are
    /// sample-identical.
    pub fn render(&self, message: &[u8]) -> Vec<f64> {
        let sr = SAMPLE_RATE as f64;
        let tone = (self.tone_ms * sr / 1000.0).round() as usize;
        let gap = (self.gap_ms * sr / 1000.0).round() as usize;
        let fade = (FADE_MS * sr / 1000.0).round() as usize;
        let mut out = Vec::with_capacity(message.len() * (tone + gap));
        for d in self.spoken_order(message) {
            let f = self.pitch(d);
            for n in 0..tone {
                let edge = n.min(tone - 1 - n);
                let env = if edge < fade {
                    0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                out.push(AMPLITUDE * env * (2.0 * PI * f * n as f64 / sr).sin());
            }
            out.extend(std::iter::repeat_n(0.0, gap));
        }
        out
    }

    pub fn transcript(&self, message: &[u8]) -> String {
        self.spoken_order(message)
            .iter()
            .map(|&d| DIGIT_WORDS[d as usize])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Messages of 3 to 5 random digits.
pub fn toy_messages(seed: u64, n: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=5);
            (0..len).map(|_| rng.random_range(0..10u8)).collect()
        })
        .collect()
}

/// `n / 8` dev and `n / 8` test utterances at the end, the rest train.
pub fn toy_splits(n: usize) -> Vec<Split> {
    let held = n / 8;
    let train = n - 2 * held;
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + held {
                Split::Dev
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Writes `wav/src/<id>.wav`, `wav/tgt/<id>.wav` and `manifest.tsv` under
/// `out_dir`. The same seed gives byte-identical files.
pub fn make_toy_corpus(out_dir: &Path, seed: u64, n_pairs: usize) -> Result<Manifest> {
    if n_pairs == 0 {
        return Err(Error::InvalidInput("need at least one pair".into()));
    }
    for sub in ["wav/src", "wav/tgt"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let messages = toy_messages(seed, n_pairs);
    let splits = toy_splits(n_pairs);
    let mut entries = Vec::with_capacity(n_pairs);
    for (i, (msg, split)) in messages.iter().zip(splits).enumerate() {
        let id = format!("utt{i:04}");
        let src = format!("wav/src/{id}.wav");
        let tgt = format!("wav/tgt/{id}.wav");
        write_wav(&out_dir.join(&src), &Waveform::new(SOURCE_LANGUAGE.render(msg), SAMPLE_RATE)?)?;
        write_wav(&out_dir.join(&tgt), &Waveform::new(TARGET_LANGUAGE.render(msg), SAMPLE_RATE)?)?;
        entries.push(ManifestEntry {
            utt_id: id,
            split,
            src_wav: src.into(),
            tgt_wav: tgt.into(),
            transcript_src: Some(SOURCE_LANGUAGE.transcript(msg)),
            transcript_tgt: Some(TARGET_LANGUAGE.transcript(msg)),
        });
    }
    let manifest = Manifest::new(out_dir, entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
