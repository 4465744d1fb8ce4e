use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{corpus_bleu, edit_distance, BleuScore};
use crate::error::{Error, Result};

/// One test utterance; `hyp` is `None` when inference produced no output.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub hyp: Option<Vec<String>>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    /// Sentence BLEU with add-one smoothing.
    pub bleu: f64,
    pub ter: f64,
    pub exact: bool,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub corpus: BleuScore,
    /// Total edits over total reference tokens.
    pub token_error_rate: f64,
    pub exact_match_rate: f64,
    /// Word-level BLEU when transcripts were supplied.
    pub word_bleu: Option<BleuScore>,
    pub missing: Vec<String>,
}

/// Scores every item that has a hypothesis; the rest are listed as missing.
pub fn evaluate_items(items: &[EvalItem], smoothing: bool) -> Result<EvalReport> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut utterances = Vec::new();
    let mut missing = Vec::new();
    let mut edits = 0usize;
    let mut ref_total = 0usize;
    for item in items {
        let Some(hyp) = &item.hyp else {
            missing.push(item.id.clone());
            continue;
        };
        if item.reference.is_empty() {
            return Err(Error::InvalidInput(format!("empty reference for {}", item.id)));
        }
        let e = edit_distance(hyp, &item.reference);
        edits += e;
        ref_total += item.reference.len();
        let sentence = corpus_bleu(std::slice::from_ref(hyp), std::slice::from_ref(&item.reference), 4, true)?;
        utterances.push(UtteranceScore {
            id: item.id.clone(),
            bleu: sentence.bleu,
            ter: e as f64 / item.reference.len() as f64,
            exact: *hyp == item.reference,
            hyp_len: hyp.len(),
            ref_len: item.reference.len(),
        });
        hyps.push(hyp.clone());
        refs.push(item.reference.clone());
    }
    if hyps.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no hypotheses to evaluate ({} missing)",
            missing.len()
        )));
    }
    let corpus = corpus_bleu(&hyps, &refs, 4, smoothing)?;
    let exact = utterances.iter().filter(|u| u.exact).count();
    Ok(EvalReport {
        exact_match_rate: exact as f64 / utterances.len() as f64,
        token_error_rate: edits as f64 / ref_total as f64,
        utterances,
        corpus,
        word_bleu: None,
        missing,
    })
}

impl EvalReport {
    /// Tab-separated table: one row per utterance, then a `CORPUS` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("utt_id\tbleu\tter\texact\thyp_len\tref_len\n");
        for u in &self.utterances {
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{}\t{}\t{}",
                u.id, u.bleu, u.ter, u.exact as u8, u.hyp_len, u.ref_len
            );
        }
        let _ = writeln!(
            out,
            "CORPUS\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            self.corpus.bleu, self.token_error_rate, self.exact_match_rate, self.corpus.hyp_len, self.corpus.ref_len
        );
        out
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join(format!("{stem}.tsv"));
        std::fs::write(&tsv, self.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
