use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Learned unit inventory plus the EMA accumulators that drive it.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K x D_e`
    pub vectors: Array2<f64>,
    /// Smoothed assignment counts `N_i`.
    pub ema_counts: Array1<f64>,
    /// Smoothed sums of assigned encoder outputs `m_i`, `K x D_e`.
    pub ema_sums: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// Row `t` is exactly `vectors[codes[t]]`.
    pub quantized: Array2<f64>,
    pub pre_quant: Array2<f64>,
    /// Euclidean distance from each frame to each code, `T x K`.
    pub distances: Option<Array2<f64>>,
}

impl Codebook {
    /// Starts the accumulators as if each vector had been seen once.
    pub fn new(vectors: Array2<f64>) -> Self {
        let k = vectors.nrows();
        Self {
            ema_sums: vectors.clone(),
            ema_counts: Array1::ones(k),
            vectors,
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    fn nearest(&self, z: &[f64], distances: Option<&mut [f64]>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        let mut dist_out = distances;
        for (i, e) in self.vectors.rows().into_iter().enumerate() {
            let d: f64 = z.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if let Some(out) = dist_out.as_deref_mut() {
                out[i] = d.sqrt();
            }
            // strict comparison keeps the lowest index on ties
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Nearest-code assignment for each row of `z`.
    pub fn assign(&self, z: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.check_dim(z.ncols())?;
        Ok(z.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                self.nearest(&row, None)
            })
            .collect())
    }

    pub fn quantize(&self, z: &Array2<f64>, with_distances: bool) -> Result<QuantizationResult> {
        self.check_dim(z.ncols())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite encoder output".into()));
        }
        let t_len = z.nrows();
        let k = self.size();
        let mut distances = with_distances.then(|| Array2::zeros((t_len, k)));
        let mut codes = Vec::with_capacity(t_len);
        let mut row_d = vec![0.0; k];
        for (t, row) in z.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let c = self.nearest(&row, with_distances.then_some(row_d.as_mut_slice()));
            if let Some(d) = distances.as_mut() {
                d.row_mut(t).assign(&Array1::from(row_d.clone()));
            }
            codes.push(c);
        }
        let quantized = self.lookup(&codes)?;
        Ok(QuantizationResult {
            codes,
            quantized,
            pre_quant: z.clone(),
            distances,
        })
    }

    pub fn lookup(&self, codes: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((codes.len(), self.dim()));
        for (t, &c) in codes.iter().enumerate() {
            if c >= self.size() {
                return Err(Error::TokenOutOfRange {
                    token: c,
                    vocab: self.size(),
                });
            }
            out.row_mut(t).assign(&self.vectors.row(c));
        }
        Ok(out)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "frame dimension {} vs code dimension {}",
                d,
                self.dim()
            )));
        }
        Ok(())
    }

    /// One exponential-moving-average step.
    ///
    /// `N_i <- decay N_i + (1 - decay) n_i`, `m_i <- decay m_i + (1 - decay) sum z`,
    /// then `e_i = m_i / N~_i` with Laplace-smoothed counts
    /// `N~_i = (N_i + eps) / (sum N + K eps) * sum N`. A code whose smoothed
    /// count is zero keeps its vector.
    pub fn ema_update(&mut self, z: ArrayView2<f64>, codes: &[usize], decay: f64, epsilon: f64) -> Result<()> {
        self.check_dim(z.ncols())?;
        if z.nrows() != codes.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} codes",
                z.nrows(),
                codes.len()
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        let k = self.size();
        let mut counts = Array1::<f64>::zeros(k);
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        for (row, &c) in z.rows().into_iter().zip(codes) {
            if c >= k {
                return Err(Error::TokenOutOfRange { token: c, vocab: k });
            }
            counts[c] += 1.0;
            let mut s = sums.row_mut(c);
            s += &row;
        }
        self.ema_counts = &self.ema_counts * decay + &counts * (1.0 - decay);
        self.ema_sums = &self.ema_sums * decay + &sums * (1.0 - decay);
        let total: f64 = self.ema_counts.sum();
        for i in 0..k {
            let smoothed = (self.ema_counts[i] + epsilon) / (total + k as f64 * epsilon) * total;
            if smoothed > 0.0 && smoothed.is_finite() {
                let row = self.ema_sums.row(i).mapv(|v| v / smoothed);
                self.vectors.row_mut(i).assign(&row);
            }
        }
        Ok(())
    }

    /// Rounds all state to f32 precision so f32 checkpoints hold it exactly.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.vectors.iter_mut().for_each(r);
        self.ema_counts.iter_mut().for_each(r);
        self.ema_sums.iter_mut().for_each(r);
    }
}

/// `exp(-sum p_i ln p_i)` over code usage frequencies; 1 for a single code,
/// `K` for uniform use.
pub fn perplexity(codes: &[usize], k: usize) -> f64 {
    if codes.is_empty() {
        return 1.0;
    }
    let mut counts = vec![0usize; k];
    for &c in codes {
        if c < k {
            counts[c] += 1;
        }
    }
    let n = codes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp().clamp(1.0, k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_match_and_tie_break() {
        let cb = Codebook::new(array![[0.0, 0.0], [2.0, 0.0], [5.0, 5.0], [1.0, 1.0]]);
        let q = cb.quantize(&array![[1.0, 1.0], [1.0, 0.0]], true).unwrap();
        assert_eq!(q.codes[0], 3);
        assert_eq!(q.distances.as_ref().unwrap()[[0, 3]], 0.0);
        // (1, 0) is distance 1 from both code 0 and code 1
        assert_eq!(q.codes[1], 0);
        assert_eq!(q.quantized.row(0), cb.vectors.row(3));
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = Codebook::new(random(&mut rng, 32, 6));
        let z = random(&mut rng, 200, 6);
        let q = cb.quantize(&z, false).unwrap();
        for t in 0..200 {
            let mut best = (0, f64::INFINITY);
            for i in 0..32 {
                let d = (&z.row(t) - &cb.vectors.row(i)).mapv(|v| v * v).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(q.codes[t], best.0);
        }
    }

    #[test]
    fn zero_memory_ema_lands_on_batch_value() {
        let mut cb = Codebook::new(Array2::zeros((8, 3)));
        let v = array![0.25, -1.5, 3.0];
        let z = Array2::from_shape_fn((4, 3), |(_, d)| v[d]);
        cb.ema_update(z.view(), &[5, 5, 5, 5], 0.0, 0.0).unwrap();
        assert_eq!(cb.vectors.row(5), v.view());
    }

    #[test]
    fn unassigned_codes_stay_finite_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = Codebook::new(random(&mut rng, 4, 2));
        let bound = cb.vectors.row(3).mapv(|v| v * v).sum().sqrt() * 1.01;
        let z = random(&mut rng, 10, 2);
        for _ in 0..2000 {
            cb.ema_update(z.view(), &[0; 10], 0.99, 1e-5).unwrap();
            let e = cb.vectors.row(3);
            assert!(e.iter().all(|v| v.is_finite()));
            assert!(e.mapv(|v| v * v).sum().sqrt() <= bound);
        }
    }

    #[test]
    fn ema_rejects_bad_codes() {
        let mut cb = Codebook::new(Array2::zeros((2, 2)));
        assert!(cb.ema_update(Array2::zeros((1, 2)).view(), &[2], 0.5, 0.0).is_err());
        assert!(cb.ema_update(Array2::zeros((2, 2)).view(), &[0], 0.5, 0.0).is_err());
    }

    #[test]
    fn perplexity_bounds() {
        assert_eq!(perplexity(&[3, 3, 3], 8), 1.0);
        assert!((perplexity(&[0, 1, 2, 3], 4) - 4.0).abs() < 1e-12);
        let p = perplexity(&[0, 0, 1, 2], 4);
        assert!(p > 1.0 && p < 4.0);
    }
}
