use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::artifacts::RunArtifacts;
use super::config::ExperimentConfig;
use super::manifest::{Manifest, Split};
use super::stages::{load_stats, read_id_codes, read_split_codes};
use crate::error::{Error, Result, StageContext};
use crate::eval::{corpus_bleu, evaluate_items, EvalItem, EvalReport};
use crate::features::{compute_mfcc, CorpusStats, FeatureConfig, FeatureSequence, Waveform};
use crate::inverter::InverterModel;
use crate::io::{read_lines, read_wav, write_code_lines, write_lines, write_wav};
use crate::s2s::{S2sModel, Translation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub source_frames: usize,
    pub log_prob: f64,
    pub truncated: bool,
    pub spectral_convergence: f64,
    /// One row per decoder step (including the closing EOS), one column per
    /// encoder state.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub waveform: Waveform,
    pub codes: Vec<usize>,
    pub diagnostics: Diagnostics,
}

/// The trained translation and synthesis models of one run.
pub struct Translator {
    pub features: FeatureConfig,
    pub src_stats: CorpusStats,
    pub s2s: S2sModel,
    pub inverter: InverterModel,
}

impl Translator {
    /// Needs the s2s model, the inverter and the corpus statistics.
    pub fn load(run: &RunArtifacts, cfg: &ExperimentConfig) -> Result<Self> {
        let needed = [run.vqvae_checkpoint(), run.inverter_checkpoint(), run.s2s_checkpoint()];
        let missing: Vec<String> = needed
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "inference needs all three trained models; missing {}",
                missing.join(", ")
            )))
            .stage("inference");
        }
        let stats = load_stats(run).stage("inference")?;
        let s2s = S2sModel::load(&run.s2s_checkpoint()).stage("inference")?;
        let inverter = InverterModel::load(&run.inverter_checkpoint()).stage("inference")?;
        if s2s.config.codebook_size != inverter.codebook.size() {
            return Err(Error::CheckpointMismatch(format!(
                "s2s vocabulary covers {} codes but the inverter codebook has {}",
                s2s.config.codebook_size,
                inverter.codebook.size()
            )))
            .stage("inference");
        }
        Ok(Self {
            features: cfg.features.clone(),
            src_stats: stats.src_mfcc,
            s2s,
            inverter,
        })
    }

    /// Source MFCCs, normalised with the training statistics.
    pub fn source_features(&self, wav: &Waveform) -> Result<FeatureSequence> {
        if wav.sample_rate != self.features.sample_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate {} Hz, expected {}",
                wav.sample_rate, self.features.sample_rate
            )));
        }
        self.src_stats.normalize(&compute_mfcc(wav, &self.features)?)
    }

    /// Source speech to target codes only.
    pub fn translate_codes(&self, wav: &Waveform) -> Result<Translation> {
        let x = self.source_features(wav).stage("features")?;
        self.s2s.translate(&x).stage("s2s")
    }

    /// Attention weights while re-reading `tokens` (plus EOS).
    fn attention_rows(&self, x: &FeatureSequence, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let enc = self.s2s.s2s_encode(x)?;
        let mut state = self.s2s.initial_state(1)?;
        let mut prev = self.s2s.config.bos();
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        for &tok in tokens.iter().chain(std::iter::once(&self.s2s.config.eos())) {
            let out = self.s2s.decoder_step(&enc, &[prev], &state)?;
            rows.push(out.attention.weights.to_dtype(DType::F64)?.squeeze(0)?.to_vec1::<f64>()?);
            state = out.state;
            prev = tok;
        }
        Ok(rows)
    }

    /// Source waveform to target waveform: MFCC, translation, inversion,
    /// Griffin-Lim.
    pub fn run(&self, wav: &Waveform) -> Result<InferenceOutput> {
        let x = self.source_features(wav).stage("features")?;
        let t = self.s2s.translate(&x).stage("s2s")?;
        if t.tokens.is_empty() {
            return Err(Error::InvalidInput("translation produced no codes".into())).stage("s2s");
        }
        let attention = self.attention_rows(&x, &t.tokens).stage("s2s")?;
        let syn = self.inverter.synthesize(&t.tokens, &self.features).stage("inverter")?;
        Ok(InferenceOutput {
            waveform: syn.waveform,
            codes: t.tokens,
            diagnostics: Diagnostics {
                source_frames: x.num_frames(),
                log_prob: t.log_prob,
                truncated: t.truncated,
                spectral_convergence: syn.spectral_convergence,
                attention,
            },
        })
    }
}

pub fn run_inference(wav: &Waveform, translator: &Translator) -> Result<InferenceOutput> {
    translator.run(wav)
}

/// Writes `<stem>.wav`, `<stem>.codes` and `<stem>.json` (diagnostics).
pub fn write_inference(out: &InferenceOutput, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_wav(&dir.join(format!("{stem}.wav")), &out.waveform)?;
    write_code_lines(&dir.join(format!("{stem}.codes")), std::slice::from_ref(&out.codes))?;
    let diag = dir.join(format!("{stem}.json"));
    std::fs::write(&diag, serde_json::to_string(&out.diagnostics)?).map_err(|e| Error::io(&diag, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInference {
    pub split: Split,
    pub translated: usize,
    /// `(utt_id, error message)` for utterances that failed.
    pub failures: Vec<(String, String)>,
}

/// Translates every utterance of `split`. With `synthesize` off only the
/// codes are produced, which skips the inverter and Griffin-Lim.
pub fn run_split_inference(
    manifest: &Manifest,
    translator: &Translator,
    run: &RunArtifacts,
    split: Split,
    synthesize: bool,
) -> Result<SplitInference> {
    let dir = run.inference_dir(split);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    let mut codes = Vec::new();
    let mut failures = Vec::new();
    for (_, e) in manifest.split(split) {
        let result = read_wav(&manifest.src_path(e)).and_then(|wav| {
            if synthesize {
                let out = translator.run(&wav)?;
                write_inference(&out, &dir, &e.utt_id)?;
                Ok(out.codes)
            } else {
                Ok(translator.translate_codes(&wav)?.tokens)
            }
        });
        match result {
            Ok(c) => {
                ids.push(e.utt_id.clone());
                codes.push(c);
            }
            Err(err) => {
                log::warn!("{}: {err}", e.utt_id);
                failures.push((e.utt_id.clone(), err.to_string()));
            }
        }
    }
    write_code_lines(&run.inference_codes_path(split), &codes)?;
    write_lines(&run.inference_ids_path(split), &ids)?;
    Ok(SplitInference {
        split,
        translated: ids.len(),
        failures,
    })
}

/// Hypothesis transcripts: either `utt_id<TAB>words` per line, or plain
/// lines paired with the split's utterances in manifest order.
fn read_hyp_transcripts(path: &Path, ids: &[String]) -> Result<HashMap<String, Vec<String>>> {
    let lines = read_lines(path)?;
    let keyed = lines.iter().any(|l| l.contains('\t'));
    let toks = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    if keyed {
        lines
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (id, words) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::format(path, format!("line without utterance id: {l:?}")))?;
                Ok((id.to_owned(), toks(words)))
            })
            .collect()
    } else {
        if lines.len() != ids.len() {
            return Err(Error::format(
                path,
                format!("{} lines for {} utterances", lines.len(), ids.len()),
            ));
        }
        Ok(ids.iter().cloned().zip(lines.iter().map(|l| toks(l))).collect())
    }
}

/// Scores inference codes for `split` against the stage-1 target codes,
/// plus word BLEU when hypothesis transcripts are given. Writes
/// `eval/<split>.tsv` and `eval/<split>.json`.
pub fn evaluate_run(
    manifest: &Manifest,
    run: &RunArtifacts,
    split: Split,
    transcripts: Option<&Path>,
    smoothing: bool,
) -> Result<EvalReport> {
    let refs: HashMap<String, Vec<usize>> = read_split_codes(run, split).stage("evaluate")?.into_iter().collect();
    let hyps: HashMap<String, Vec<usize>> = read_id_codes(&run.inference_ids_path(split), &run.inference_codes_path(split))
        .map_err(|e| match e {
            Error::MissingArtifact(m) => Error::MissingArtifact(format!("no inference outputs for {split}: {m}")),
            other => other,
        })
        .stage("evaluate")?
        .into_iter()
        .collect();
    let words = |c: &[usize]| c.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let mut items = Vec::new();
    for (_, e) in manifest.split(split) {
        let reference = refs
            .get(&e.utt_id)
            .ok_or_else(|| Error::MissingArtifact(format!("no reference codes for {}", e.utt_id)))?;
        items.push(EvalItem {
            id: e.utt_id.clone(),
            hyp: hyps.get(&e.utt_id).map(|h| words(h)),
            reference: words(reference),
        });
    }
    let mut report = evaluate_items(&items, smoothing).stage("evaluate")?;
    if let Some(path) = transcripts {
        let ids = manifest.ids(split);
        let hyp_words = read_hyp_transcripts(path, &ids)?;
        let mut h = Vec::new();
        let mut r = Vec::new();
        for (_, e) in manifest.split(split) {
            if let (Some(hw), Some(rw)) = (hyp_words.get(&e.utt_id), e.transcript_tgt.as_deref()) {
                h.push(hw.clone());
                r.push(rw.split_whitespace().map(str::to_owned).collect::<Vec<_>>());
            }
        }
        if !h.is_empty() {
            report.word_bleu = Some(corpus_bleu(&h, &r, 4, smoothing)?);
        }
    }
    report.write(&run.eval_dir(), split.as_str())?;
    Ok(report)
}
