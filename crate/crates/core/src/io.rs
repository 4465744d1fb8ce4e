//! On-disk formats: the SP2C tensor container, WAV audio, and code-sequence
//! text files.
//!
//! SP2C layout (all integers little-endian):
//!
//! ```text
//! magic   b"SP2C"
//! version u32 = 1
//! kind    u8   (0 raw, 1 mfcc39, 2 linear1025, 3 mel)
//! ndim    u32
//! dims    u64 * ndim
//! payload f32 * prod(dims), row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence, Waveform};

pub const TENSOR_MAGIC: &[u8; 4] = b"SP2C";
pub const TENSOR_VERSION: u32 = 1;

/// A dense f32 tensor as stored in an SP2C record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub kind: FeatureKind,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(kind: FeatureKind, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self { kind, dims, data })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.code()])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.dims.len() + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one record; `origin` names the source in error messages.
    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TENSOR_MAGIC {
            return Err(bad("bad magic, not an SP2C tensor"));
        }
        let version = read_u32(r).map_err(|_| bad("truncated header"))?;
        if version != TENSOR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(|_| bad("truncated header"))?;
        let kind = FeatureKind::from_code(kind[0]).ok_or_else(|| bad("unknown kind code"))?;
        let ndim = read_u32(r).map_err(|_| bad("truncated header"))? as usize;
        if ndim > 8 {
            return Err(bad("implausible rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for _ in 0..ndim {
            let d = read_u64(r).map_err(|_| bad("truncated dims"))? as usize;
            n = n.checked_mul(d).ok_or_else(|| bad("dims overflow"))?;
            dims.push(d);
        }
        if n > (1 << 31) {
            return Err(bad("payload too large"));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { kind, dims, data })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let rec = TensorRecord {
        kind: seq.kind,
        dims: vec![seq.num_frames(), seq.dim()],
        data: seq.frames.iter().map(|v| *v as f32).collect(),
    };
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    rec.write_to(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, hop_ms: f64) -> Result<FeatureSequence> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rec = TensorRecord::read_from(&mut BufReader::new(f), path)?;
    if rec.dims.len() != 2 {
        return Err(Error::format(path, "feature file must be rank 2"));
    }
    let frames = Array2::from_shape_vec(
        (rec.dims[0], rec.dims[1]),
        rec.data.iter().map(|v| *v as f64).collect(),
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    FeatureSequence::new(frames, rec.kind, hop_ms)
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads mono 16-bit integer or 32-bit float WAV.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono, got {} channels", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {fmt:?}/{bits} bits"),
            ))
        }
    };
    if samples.is_empty() {
        return Err(Error::UtteranceTooShort {
            samples: 0,
            window: 1,
        });
    }
    Waveform::new(samples, spec.sample_rate)
}

/// One utterance per line, space-separated integers.
pub fn write_code_lines(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_code_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let seq = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("line {}: bad code {t:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

/// Whitespace-tokenised lines (hypothesis/reference transcripts).
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let rec = TensorRecord::new(FeatureKind::Linear1025, vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = rec.to_bytes();
        assert_eq!(&b[0..4], b"SP2C");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 2);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..21], &1u64.to_le_bytes());
        assert_eq!(&b[21..29], &2u64.to_le_bytes());
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(&b[33..37], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let rec = TensorRecord::new(FeatureKind::Raw, vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = rec.to_bytes();
        let p = Path::new("mem");
        assert!(TensorRecord::read_from(&mut &b[..b.len() - 1], p).is_err());
        b[0] = b'X';
        assert!(TensorRecord::read_from(&mut &b[..], p).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(rows in 0usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let rec = TensorRecord::new(FeatureKind::Mfcc39, vec![rows, cols], data).unwrap();
            let back = TensorRecord::read_from(&mut &rec.to_bytes()[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, rec);
        }
    }

    #[test]
    fn wav_and_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new((0..800).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(), 16_000).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let seq = FeatureSequence::new(
            Array2::from_shape_fn((4, 39), |(t, d)| (t * 39 + d) as f64 * 0.5),
            FeatureKind::Mfcc39,
            10.0,
        )
        .unwrap();
        let fp = dir.path().join("a.sp2c");
        write_features(&fp, &seq).unwrap();
        assert_eq!(read_features(&fp, 10.0).unwrap(), seq);
    }

    #[test]
    fn code_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let seqs = vec![vec![1, 2, 3], vec![], vec![31]];
        write_code_lines(&p, &seqs).unwrap();
        assert_eq!(read_code_lines(&p).unwrap(), seqs);
        assert_eq!(fs::read_to_string(&p).unwrap(), "1 2 3\n\n31\n");
    }
}
