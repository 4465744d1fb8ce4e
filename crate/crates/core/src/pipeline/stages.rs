use candle_core::DType;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::RunArtifacts;
use super::config::ExperimentConfig;
use super::manifest::{Manifest, Split};
use crate::error::{Error, Result, StageContext};
use crate::features::{compute_linear_spectrogram, compute_mfcc, CorpusStats, FeatureConfig, FeatureSequence};
use crate::inverter::{InverterMetrics, InverterModel, InverterTrainer};
use crate::io::{read_code_lines, read_features, read_lines, read_wav, write_code_lines, write_features, write_lines};
use crate::nn::scalar;
use crate::s2s::{s2s_loss, token_accuracy, S2sBatch, S2sMetrics, S2sModel, S2sTrainer};
use crate::vqvae::{VqMetrics, VqVaeModel, VqVaeTrainer};

/// Independent seeds for the parts of one run.
pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ tag
}

const SEED_VQ_INIT: u64 = 1;
const SEED_VQ_TRAIN: u64 = 2;
const SEED_VQ_BATCH: u64 = 3;
const SEED_INV_INIT: u64 = 4;
const SEED_INV_BATCH: u64 = 5;
const SEED_S2S_INIT: u64 = 6;
const SEED_S2S_TRAIN: u64 = 7;
const SEED_S2S_BATCH: u64 = 8;

/// Epoch-wise shuffled minibatches over `0..n`.
pub(crate) struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Features for every manifest entry, in manifest order.
pub struct CorpusFeatures {
    pub src_mfcc: Vec<FeatureSequence>,
    pub tgt_mfcc: Vec<FeatureSequence>,
    /// Linear magnitude spectrograms of the target side.
    pub tgt_spec: Vec<FeatureSequence>,
}

/// Normalisation statistics fitted on the training split.
pub struct CorpusStatsSet {
    pub src_mfcc: CorpusStats,
    pub tgt_mfcc: CorpusStats,
    pub tgt_spec: CorpusStats,
}

fn feature_paths(run: &RunArtifacts, utt: &str) -> [std::path::PathBuf; 3] {
    let d = run.features_dir();
    ["src_mfcc", "tgt_mfcc", "tgt_spec"].map(|k| d.join(format!("{utt}.{k}.sp2c")))
}

/// Computes missing feature files under the run directory, then loads all
/// of them. Later stages only ever see the stored (f32) values.
pub fn prepare_features(manifest: &Manifest, cfg: &FeatureConfig, run: &RunArtifacts) -> Result<CorpusFeatures> {
    cfg.validate()?;
    run.dir("features")?;
    manifest
        .entries
        .par_iter()
        .map(|e| -> Result<()> {
            let paths = feature_paths(run, &e.utt_id);
            if paths.iter().all(|p| p.is_file()) {
                return Ok(());
            }
            let src = read_wav(&manifest.src_path(e))?;
            let tgt = read_wav(&manifest.tgt_path(e))?;
            for w in [&src, &tgt] {
                if w.sample_rate != cfg.sample_rate {
                    return Err(Error::InvalidInput(format!(
                        "{}: sample rate {} Hz, expected {}",
                        e.utt_id, w.sample_rate, cfg.sample_rate
                    )));
                }
            }
            let tgt_mfcc = compute_mfcc(&tgt, cfg)?;
            let tgt_spec = compute_linear_spectrogram(&tgt, cfg)?;
            if tgt_mfcc.num_frames() != tgt_spec.num_frames() {
                return Err(Error::Shape(format!(
                    "{}: {} MFCC frames vs {} spectrogram frames",
                    e.utt_id,
                    tgt_mfcc.num_frames(),
                    tgt_spec.num_frames()
                )));
            }
            write_features(&paths[0], &compute_mfcc(&src, cfg)?)?;
            write_features(&paths[1], &tgt_mfcc)?;
            write_features(&paths[2], &tgt_spec)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()
        .stage("features")?;
    let mut out = CorpusFeatures {
        src_mfcc: Vec::new(),
        tgt_mfcc: Vec::new(),
        tgt_spec: Vec::new(),
    };
    for e in &manifest.entries {
        let [a, b, c] = feature_paths(run, &e.utt_id);
        out.src_mfcc.push(read_features(&a, cfg.hop_ms)?);
        out.tgt_mfcc.push(read_features(&b, cfg.hop_ms)?);
        out.tgt_spec.push(read_features(&c, cfg.hop_ms)?);
    }
    Ok(out)
}

fn train_indices(manifest: &Manifest) -> Result<Vec<usize>> {
    let idx: Vec<usize> = manifest.split(Split::Train).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("manifest has no training utterances".into()));
    }
    Ok(idx)
}

/// Fits statistics on the training split, stores them, and returns the
/// stored (f32-rounded) copy.
pub fn fit_stats(manifest: &Manifest, feats: &CorpusFeatures, run: &RunArtifacts) -> Result<CorpusStatsSet> {
    let train = train_indices(manifest)?;
    run.dir("stats")?;
    for (name, seqs) in [
        ("src_mfcc", &feats.src_mfcc),
        ("tgt_mfcc", &feats.tgt_mfcc),
        ("tgt_spec", &feats.tgt_spec),
    ] {
        let stats = CorpusStats::fit(train.iter().map(|&i| &seqs[i]))?;
        let path = run.stats_path(name);
        write_features(&path, &stats.to_sequence())?;
    }
    load_stats(run)
}

pub fn load_stats(run: &RunArtifacts) -> Result<CorpusStatsSet> {
    let load = |name: &str| -> Result<CorpusStats> {
        let path = run.stats_path(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact(format!("statistics file {} missing", path.display())));
        }
        CorpusStats::from_sequence(&read_features(&path, 0.0)?)
    };
    Ok(CorpusStatsSet {
        src_mfcc: load("src_mfcc")?,
        tgt_mfcc: load("tgt_mfcc")?,
        tgt_spec: load("tgt_spec")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqVaeSummary {
    pub first: VqMetrics,
    pub last: VqMetrics,
    /// Utterances with extracted codes, over all splits.
    pub coded_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterSummary {
    pub first: InverterMetrics,
    pub last: InverterMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub vqvae: VqVaeSummary,
    pub inverter: InverterSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub step: usize,
    pub dev_loss: f64,
    pub dev_token_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2sSummary {
    pub first: S2sMetrics,
    pub last: S2sMetrics,
    pub dev: Option<DevMetrics>,
}

fn should_log(step: usize, total: usize, every: usize) -> bool {
    step == 1 || step == total || step % every == 0
}

/// Codes of every utterance, grouped by split, from a trained VQ-VAE.
fn extract_all_codes(
    manifest: &Manifest,
    model: &VqVaeModel,
    feats: &CorpusFeatures,
    stats: &CorpusStats,
) -> Result<Vec<Vec<usize>>> {
    manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, _)| model.extract_codes(&stats.normalize(&feats.tgt_mfcc[i])?))
        .collect()
}

fn write_split_codes(manifest: &Manifest, run: &RunArtifacts, codes: &[Vec<usize>]) -> Result<()> {
    run.dir("codes")?;
    for split in Split::ALL {
        let (ids, seqs): (Vec<String>, Vec<Vec<usize>>) = manifest
            .split(split)
            .map(|(i, e)| (e.utt_id.clone(), codes[i].clone()))
            .unzip();
        write_code_lines(&run.codes_path(split), &seqs)?;
        write_lines(&run.code_ids_path(split), &ids)?;
    }
    Ok(())
}

/// Stage-1 codes for one split as `(utt_id, codes)`.
pub fn read_split_codes(run: &RunArtifacts, split: Split) -> Result<Vec<(String, Vec<usize>)>> {
    read_id_codes(&run.code_ids_path(split), &run.codes_path(split))
}

pub(crate) fn read_id_codes(ids: &std::path::Path, codes: &std::path::Path) -> Result<Vec<(String, Vec<usize>)>> {
    for p in [ids, codes] {
        if !p.is_file() {
            return Err(Error::MissingArtifact(format!("{} missing", p.display())));
        }
    }
    let id_lines = read_lines(ids)?;
    let code_lines = read_code_lines(codes)?;
    let id_lines: Vec<String> = id_lines.into_iter().filter(|l| !l.is_empty()).collect();
    if id_lines.len() != code_lines.len() {
        return Err(Error::format(
            codes,
            format!("{} code lines for {} ids", code_lines.len(), id_lines.len()),
        ));
    }
    Ok(id_lines.into_iter().zip(code_lines).collect())
}

/// Trains the VQ-VAE on normalised target MFCCs, saves it, and extracts
/// target codes for every split.
pub fn train_vqvae(manifest: &Manifest, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<VqVaeSummary> {
    let feats = prepare_features(manifest, &cfg.features, run)?;
    let stats = fit_stats(manifest, &feats, run)?;
    let train = train_indices(manifest)?;
    let data: Vec<Array2<f64>> = train
        .iter()
        .map(|&i| Ok(stats.tgt_mfcc.normalize(&feats.tgt_mfcc[i])?.frames))
        .collect::<Result<_>>()?;
    let vc = &cfg.vqvae;
    let mut model = VqVaeModel::new(vc.clone(), sub_seed(cfg.seed, SEED_VQ_INIT), DType::F32)?;
    let mut trainer = VqVaeTrainer::new(&model, sub_seed(cfg.seed, SEED_VQ_TRAIN))?;
    let mut sampler = BatchSampler::new(data.len(), vc.batch_size, sub_seed(cfg.seed, SEED_VQ_BATCH));
    let mut log = run.metrics_log("vqvae")?;
    let mut first = None;
    let mut last = None;
    for _ in 0..vc.steps {
        let items: Vec<(&Array2<f64>, usize)> = sampler.next_batch().into_iter().map(|i| (&data[i], 0)).collect();
        let m = trainer.train_step(&mut model, &items).stage("vqvae")?;
        if should_log(m.step, vc.steps, cfg.training.log_every) {
            log.write("train", &m)?;
        }
        first.get_or_insert_with(|| m.clone());
        last = Some(m);
    }
    log.finish()?;
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::Config("vqvae.steps must be positive".into()));
    };
    run.dir("checkpoints")?;
    model.save(&run.vqvae_checkpoint())?;
    let model = VqVaeModel::load(&run.vqvae_checkpoint(), Some(vc))?;
    let codes = extract_all_codes(manifest, &model, &feats, &stats.tgt_mfcc).stage("vqvae")?;
    write_split_codes(manifest, run, &codes)?;
    Ok(VqVaeSummary {
        first,
        last,
        coded_utterances: codes.len(),
    })
}

fn require(paths: &[std::path::PathBuf], what: &str) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} missing: {}", missing.join(", "))))
    }
}

/// Trains the inverter from stage-1 training codes to target spectrograms.
pub fn train_inverter(manifest: &Manifest, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<InverterSummary> {
    require(
        &[run.vqvae_checkpoint(), run.codes_path(Split::Train), run.code_ids_path(Split::Train)],
        "VQ-VAE artifacts (run train-vqvae first)",
    )?;
    let feats = prepare_features(manifest, &cfg.features, run)?;
    let stats = load_stats(run)?;
    let vq = VqVaeModel::load(&run.vqvae_checkpoint(), Some(&cfg.vqvae))?;
    let codes = read_split_codes(run, Split::Train)?;
    let train = train_indices(manifest)?;
    check_ids(manifest, &codes, &train)?;
    let ic = &cfg.inverter;
    let model = InverterModel::new(
        ic.clone(),
        vq.codebook.clone(),
        Some(stats.tgt_spec),
        sub_seed(cfg.seed, SEED_INV_INIT),
        DType::F32,
    )?;
    let mut trainer = InverterTrainer::new(&model)?;
    let mut sampler = BatchSampler::new(train.len(), ic.batch_size, sub_seed(cfg.seed, SEED_INV_BATCH));
    let mut log = run.metrics_log("inverter")?;
    let mut first = None;
    let mut last = None;
    for _ in 0..ic.steps {
        let pairs: Vec<(&[usize], &Array2<f64>)> = sampler
            .next_batch()
            .into_iter()
            .map(|j| (codes[j].1.as_slice(), &feats.tgt_spec[train[j]].frames))
            .collect();
        let m = trainer.train_step(&model, &pairs).stage("inverter")?;
        if should_log(m.step, ic.steps, cfg.training.log_every) {
            log.write("train", &m)?;
        }
        first.get_or_insert_with(|| m.clone());
        last = Some(m);
    }
    log.finish()?;
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::Config("inverter.steps must be positive".into()));
    };
    run.dir("checkpoints")?;
    model.save(&run.inverter_checkpoint())?;
    Ok(InverterSummary { first, last })
}

fn check_ids(manifest: &Manifest, codes: &[(String, Vec<usize>)], idx: &[usize]) -> Result<()> {
    if codes.len() != idx.len() || codes.iter().zip(idx).any(|((id, _), &i)| *id != manifest.entries[i].utt_id) {
        return Err(Error::CheckpointMismatch(
            "stored codes do not match the manifest; rerun train-vqvae".into(),
        ));
    }
    Ok(())
}

/// Stage 1: VQ-VAE, code extraction, inverter.
pub fn run_stage1(manifest: &Manifest, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<Stage1Summary> {
    let vqvae = train_vqvae(manifest, cfg, run)?;
    let inverter = train_inverter(manifest, cfg, run)?;
    Ok(Stage1Summary { vqvae, inverter })
}

/// Teacher-forced NLL and token accuracy.
pub fn teacher_forced_scores(model: &S2sModel, pairs: &[(&Array2<f64>, &[usize])]) -> Result<(f64, f64)> {
    let batch = S2sBatch::new(pairs, &model.config, model.dtype())?;
    let logits = model.forward_batch(&batch, 1.0, &mut || 0.0)?;
    let loss = scalar(&s2s_loss(&logits, &batch.dec_out)?)?;
    let (correct, total) = token_accuracy(&logits, &batch.dec_out)?;
    Ok((loss, correct as f64 / total.max(1) as f64))
}

/// Stage 2: the translation model from source MFCCs to stage-1 codes.
pub fn run_stage2(manifest: &Manifest, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<S2sSummary> {
    require(
        &[
            run.vqvae_checkpoint(),
            run.inverter_checkpoint(),
            run.codes_path(Split::Train),
            run.code_ids_path(Split::Train),
        ],
        "stage-1 artifacts",
    )
    .stage("s2s")?;
    let feats = prepare_features(manifest, &cfg.features, run)?;
    let stats = load_stats(run)?;
    let vq = VqVaeModel::load(&run.vqvae_checkpoint(), Some(&cfg.vqvae))?;
    let train = train_indices(manifest)?;
    let cached = read_split_codes(run, Split::Train)?;
    check_ids(manifest, &cached, &train)?;
    for ((id, codes), &i) in cached.iter().zip(&train) {
        let fresh = vq.extract_codes(&stats.tgt_mfcc.normalize(&feats.tgt_mfcc[i])?)?;
        if fresh != *codes {
            return Err(Error::CheckpointMismatch(format!(
                "cached codes for {id} differ from re-extraction; rerun train-vqvae"
            )))
            .stage("s2s");
        }
    }
    let src: Vec<Array2<f64>> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, _)| Ok(stats.src_mfcc.normalize(&feats.src_mfcc[i])?.frames))
        .collect::<Result<_>>()?;
    let dev_codes = read_split_codes(run, Split::Dev).unwrap_or_default();
    let dev_idx: Vec<usize> = manifest.split(Split::Dev).map(|(i, _)| i).collect();
    let dev_pairs: Vec<(&Array2<f64>, &[usize])> = if dev_codes.len() == dev_idx.len() {
        dev_idx.iter().zip(&dev_codes).map(|(&i, (_, c))| (&src[i], c.as_slice())).collect()
    } else {
        Vec::new()
    };
    let sc = &cfg.s2s;
    let model = S2sModel::new(sc.clone(), sub_seed(cfg.seed, SEED_S2S_INIT), DType::F32)?;
    let mut trainer = S2sTrainer::new(&model, sub_seed(cfg.seed, SEED_S2S_TRAIN))?;
    let mut sampler = BatchSampler::new(train.len(), sc.batch_size, sub_seed(cfg.seed, SEED_S2S_BATCH));
    let mut log = run.metrics_log("s2s")?;
    let mut first = None;
    let mut last = None;
    let mut dev = None;
    for _ in 0..sc.steps {
        let pairs: Vec<(&Array2<f64>, &[usize])> = sampler
            .next_batch()
            .into_iter()
            .map(|j| (&src[train[j]], cached[j].1.as_slice()))
            .collect();
        let m = trainer.train_step(&model, &pairs).stage("s2s")?;
        if should_log(m.step, sc.steps, cfg.training.log_every) {
            log.write("train", &m)?;
        }
        if !dev_pairs.is_empty() && (m.step % cfg.training.s2s_eval_every == 0 || m.step == sc.steps) {
            let (dev_loss, dev_token_acc) = teacher_forced_scores(&model, &dev_pairs).stage("s2s")?;
            let d = DevMetrics {
                step: m.step,
                dev_loss,
                dev_token_acc,
            };
            log.write("dev", &d)?;
            dev = Some(d);
        }
        first.get_or_insert_with(|| m.clone());
        last = Some(m);
    }
    log.finish()?;
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::Config("s2s.steps must be positive".into()));
    };
    run.dir("checkpoints")?;
    model.save(&run.s2s_checkpoint())?;
    Ok(S2sSummary { first, last, dev })
}
