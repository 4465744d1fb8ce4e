use ndarray::{Array1, Array2, Axis};

use super::{FeatureKind, FeatureSequence};
use crate::error::{Error, Result};

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl CorpusStats {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for seq in corpus {
            let d = seq.dim();
            match &sum {
                Some(s) if s.len() != d => {
                    return Err(Error::Shape(format!(
                        "feature dimension {} differs from corpus dimension {}",
                        d,
                        s.len()
                    )))
                }
                None => {
                    sum = Some(Array1::zeros(d));
                    sq = Some(Array1::zeros(d));
                }
                _ => {}
            }
            let (s, q) = (sum.as_mut().unwrap(), sq.as_mut().unwrap());
            for row in seq.frames.rows() {
                *s += &row;
                *q += &row.mapv(|v| v * v);
            }
            count += seq.num_frames();
        }
        let (Some(sum), Some(sq)) = (sum, sq) else {
            return Err(Error::InvalidInput("cannot fit stats on an empty corpus".into()));
        };
        if count == 0 {
            return Err(Error::InvalidInput("corpus has no frames".into()));
        }
        let n = count as f64;
        let mean = sum / n;
        let var = sq / n - &mean * &mean;
        let std = var.mapv(|v| v.max(0.0).sqrt().max(Self::STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "sequence dimension {} vs stats dimension {}",
                seq.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        self.check(seq)?;
        let frames = (&seq.frames - &self.mean.view().insert_axis(Axis(0)))
            / &self.std.view().insert_axis(Axis(0));
        Ok(FeatureSequence {
            frames,
            ..seq.clone()
        })
    }

    pub fn denormalize(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        self.check(seq)?;
        let frames = &seq.frames * &self.std.view().insert_axis(Axis(0))
            + &self.mean.view().insert_axis(Axis(0));
        Ok(FeatureSequence {
            frames,
            ..seq.clone()
        })
    }

    /// Packs into a `2 x D` matrix (mean row, std row) for storage.
    pub fn to_sequence(&self) -> FeatureSequence {
        let mut m = Array2::zeros((2, self.dim()));
        m.row_mut(0).assign(&self.mean);
        m.row_mut(1).assign(&self.std);
        FeatureSequence {
            frames: m,
            kind: FeatureKind::Raw,
            frame_hop_ms: 0.0,
        }
    }

    pub fn from_sequence(seq: &FeatureSequence) -> Result<Self> {
        if seq.num_frames() != 2 {
            return Err(Error::Shape("stats matrix must have two rows".into()));
        }
        let std = seq.frames.row(1).to_owned();
        if std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("stats std must be positive".into()));
        }
        Ok(Self {
            mean: seq.frames.row(0).to_owned(),
            std,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(m: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(m, FeatureKind::Mfcc39, 10.0).unwrap()
    }

    #[test]
    fn constant_sequence_normalizes_to_zero() {
        let s = seq(Array2::from_elem((5, 3), 4.2));
        let st = CorpusStats::fit([&s]).unwrap();
        assert!(st.std.iter().all(|v| *v == CorpusStats::STD_FLOOR));
        let n = st.normalize(&s).unwrap();
        assert!(n.frames.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn two_sequence_stats_match_hand_sums() {
        let a = seq(array![[1.0, 10.0], [3.0, 20.0]]);
        let b = seq(array![[5.0, 30.0]]);
        let st = CorpusStats::fit([&a, &b]).unwrap();
        // dim 0: values 1,3,5 -> mean 3, var (4+0+4)/3
        assert!((st.mean[0] - 3.0).abs() < 1e-12);
        assert!((st.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((st.mean[1] - 20.0).abs() < 1e-12);
        assert!((st.std[1] - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_identity() {
        let a = seq(array![[1.0, -10.0], [3.5, 20.0], [0.25, 7.0]]);
        let st = CorpusStats::fit([&a]).unwrap();
        let back = st.denormalize(&st.normalize(&a).unwrap()).unwrap();
        for (x, y) in back.frames.iter().zip(a.frames.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = seq(Array2::zeros((2, 3)));
        let b = seq(Array2::zeros((2, 4)));
        assert!(CorpusStats::fit([&a, &b]).is_err());
        let st = CorpusStats::fit([&a]).unwrap();
        assert!(st.normalize(&b).is_err());
        assert!(CorpusStats::fit(std::iter::empty()).is_err());
    }
}
