//! Three-stage training and end-to-end inference over a paired corpus.
//!
//! Stage 1 learns target-side units (VQ-VAE) and an inverter from units
//! back to spectrograms, stage 2 learns to translate source speech into
//! those units, and inference chains translation, inversion and
//! Griffin-Lim. All artifacts live in one run directory per config hash.

mod artifacts;
mod config;
mod corpus;
mod grid;
mod inference;
mod manifest;
mod stages;

pub use artifacts::{MetricsLog, Provenance, RunArtifacts};
pub use config::{EvalConfig, ExperimentConfig, GridConfig, TrainingConfig};
pub use corpus::{make_toy_corpus, toy_messages, toy_splits, ToneLanguage, SAMPLE_RATE, SOURCE_LANGUAGE, TARGET_LANGUAGE};
pub use grid::{run_cell, run_grid, GridReport, GridRow};
pub use inference::{
    evaluate_run, run_inference, run_split_inference, write_inference, Diagnostics, InferenceOutput, SplitInference,
    Translator,
};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use stages::{
    fit_stats, load_stats, prepare_features, read_split_codes, run_stage1, run_stage2, teacher_forced_scores,
    train_inverter, train_vqvae, CorpusFeatures, CorpusStatsSet, DevMetrics, InverterSummary, S2sSummary,
    Stage1Summary, VqVaeSummary,
};
