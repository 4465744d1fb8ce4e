use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::model::{DecoderState, EncoderStates, S2sModel};
use crate::error::Result;
use crate::features::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Code tokens without BOS or EOS.
    pub tokens: Vec<usize>,
    /// Log-probability of the tokens plus the closing EOS when present.
    pub log_prob: f64,
    /// The decode hit `max_decode_len` before emitting EOS.
    pub truncated: bool,
}

struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

fn row_log_probs(t: &candle_core::Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.squeeze(0)?.to_vec1::<f64>()?)
}

/// Indices of the `k` largest values, ties toward the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl S2sModel {
    /// Decodes with the configured beam width (1 is greedy).
    pub fn translate(&self, x: &FeatureSequence) -> Result<Translation> {
        if self.config.beam <= 1 {
            self.greedy(x)
        } else {
            self.beam_search(x, self.config.beam)
        }
    }

    pub fn greedy(&self, x: &FeatureSequence) -> Result<Translation> {
        let enc = self.s2s_encode(x)?;
        let eos = self.config.eos();
        let mut state = self.initial_state(1)?;
        let mut prev = self.config.bos();
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        for _ in 0..self.config.max_decode_len {
            let out = self.decoder_step(&enc, &[prev], &state)?;
            let lp = row_log_probs(&out.log_probs)?;
            let best = top_k(&lp, 1)[0];
            log_prob += lp[best];
            if best == eos {
                return Ok(Translation {
                    tokens,
                    log_prob,
                    truncated: false,
                });
            }
            tokens.push(best);
            prev = best;
            state = out.state;
        }
        Ok(Translation {
            tokens,
            log_prob,
            truncated: true,
        })
    }

    /// Beam search ranking finished hypotheses by log-probability per
    /// emitted token (EOS included).
    pub fn beam_search(&self, x: &FeatureSequence, width: usize) -> Result<Translation> {
        let enc = self.s2s_encode(x)?;
        self.beam_from_states(&enc, width.max(1))
    }

    fn beam_from_states(&self, enc: &EncoderStates, width: usize) -> Result<Translation> {
        let eos = self.config.eos();
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: self.initial_state(1)?,
        }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..self.config.max_decode_len {
            // (score, hyp index, token, next state)
            let mut candidates = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(self.config.bos());
                let out = self.decoder_step(enc, &[prev], &hyp.state)?;
                let lp = row_log_probs(&out.log_probs)?;
                for tok in top_k(&lp, width) {
                    candidates.push((hyp.log_prob + lp[tok], h, tok, out.state.clone()));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (score, h, tok, state) in candidates {
                if next.len() + finished.len() >= width {
                    break;
                }
                if tok == eos {
                    finished.push((live[h].tokens.clone(), score));
                } else {
                    let mut tokens = live[h].tokens.clone();
                    tokens.push(tok);
                    next.push(Hyp {
                        tokens,
                        log_prob: score,
                        state,
                    });
                }
            }
            live = next;
            if finished.len() >= width || live.is_empty() {
                break;
            }
        }
        let norm = |tokens: &Vec<usize>, score: f64| score / (tokens.len() + 1) as f64;
        if let Some((tokens, log_prob)) = finished
            .iter()
            .max_by(|a, b| norm(&a.0, a.1).total_cmp(&norm(&b.0, b.1)).then(b.0.len().cmp(&a.0.len())))
        {
            return Ok(Translation {
                tokens: tokens.clone(),
                log_prob: *log_prob,
                truncated: false,
            });
        }
        let best = live
            .into_iter()
            .max_by(|a, b| a.log_prob.total_cmp(&b.log_prob))
            .expect("beam keeps at least one hypothesis");
        Ok(Translation {
            tokens: best.tokens,
            log_prob: best.log_prob,
            truncated: true,
        })
    }
}
