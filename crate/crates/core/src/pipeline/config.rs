use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::inverter::InverterConfig;
use crate::s2s::{AttentionKind, S2sConfig};
use crate::vqvae::{default_stride_schedule, VqVaeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Metrics are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Dev token accuracy is measured every `s2s_eval_every` s2s steps.
    pub s2s_eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            log_every: 25,
            s2s_eval_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Add-one smoothing for corpus BLEU.
    pub smoothing: bool,
    /// Split scored by the grid.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            smoothing: false,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub codebook_sizes: Vec<usize>,
    pub time_reductions: Vec<usize>,
    /// Run cells concurrently.
    pub parallel: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![32, 64, 128],
            time_reductions: vec![4, 8, 12],
            parallel: true,
        }
    }
}

/// Everything a run depends on. The `vqvae` section owns the codebook size,
/// code width and time reduction; the matching fields of `s2s` and
/// `inverter` are overwritten from it by [`ExperimentConfig::sync_derived`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Parent of hash-named run directories.
    pub output_root: PathBuf,
    pub features: FeatureConfig,
    pub vqvae: VqVaeConfig,
    pub s2s: S2sConfig,
    pub inverter: InverterConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    /// Small models and step counts that fit the synthetic tone corpus on
    /// a CPU in minutes.
    fn default() -> Self {
        let r = 12;
        let mut cfg = Self {
            seed: 1,
            output_root: PathBuf::from("runs"),
            features: FeatureConfig::default(),
            vqvae: VqVaeConfig {
                codebook_size: 32,
                code_dim: 16,
                time_reduction: r,
                stride_schedule: default_stride_schedule(r),
                speaker_dim: 4,
                channels: 64,
                ema_decay: 0.95,
                learning_rate: 2e-3,
                batch_size: 8,
                steps: 400,
                ..Default::default()
            },
            s2s: S2sConfig {
                enc_layers: 2,
                enc_hidden: 64,
                dec_hidden: 128,
                embed_dim: 32,
                attention: AttentionKind::Mlp,
                attention_dim: 64,
                max_decode_len: 60,
                learning_rate: 3e-3,
                batch_size: 10,
                steps: 1200,
                ..Default::default()
            },
            inverter: InverterConfig {
                channels: 64,
                kernels: vec![1, 3, 5],
                pre_blocks: 1,
                post_blocks: 1,
                lstm_layers: 1,
                lstm_hidden: 32,
                learning_rate: 3e-3,
                batch_size: 8,
                steps: 200,
                ..Default::default()
            },
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
        };
        cfg.sync_derived();
        cfg
    }
}

impl ExperimentConfig {
    /// Module defaults: full-width models and long schedules.
    pub fn paper_scale() -> Self {
        let mut cfg = Self {
            vqvae: VqVaeConfig::default(),
            s2s: S2sConfig::default(),
            inverter: InverterConfig::default(),
            training: TrainingConfig {
                log_every: 100,
                s2s_eval_every: 500,
            },
            ..Self::default()
        };
        cfg.sync_derived();
        cfg
    }

    /// Copies the fields other sections derive from `features` and `vqvae`.
    pub fn sync_derived(&mut self) {
        let mfcc_dim = 3 * self.features.n_mfcc;
        self.vqvae.input_dim = mfcc_dim;
        self.s2s.input_dim = mfcc_dim;
        self.s2s.codebook_size = self.vqvae.codebook_size;
        self.inverter.time_reduction = self.vqvae.time_reduction;
        self.inverter.code_dim = self.vqvae.code_dim;
        self.inverter.output_dim = self.features.n_bins();
    }

    /// Same experiment with another grid cell's codebook size and time
    /// reduction.
    pub fn with_cell(&self, codebook_size: usize, time_reduction: usize) -> Self {
        let mut cfg = self.clone();
        cfg.vqvae.codebook_size = codebook_size;
        cfg.vqvae.time_reduction = time_reduction;
        cfg.vqvae.stride_schedule = default_stride_schedule(time_reduction);
        cfg.sync_derived();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.vqvae.validate()?;
        self.s2s.validate()?;
        self.inverter.validate()?;
        let mfcc_dim = 3 * self.features.n_mfcc;
        let checks = [
            ("vqvae.input_dim", self.vqvae.input_dim, mfcc_dim),
            ("s2s.input_dim", self.s2s.input_dim, mfcc_dim),
            ("s2s vocabulary", self.s2s.vocab(), self.vqvae.codebook_size + 2),
            ("inverter.time_reduction", self.inverter.time_reduction, self.vqvae.time_reduction),
            ("inverter.D_e", self.inverter.code_dim, self.vqvae.code_dim),
            ("inverter.output_dim", self.inverter.output_dim, self.features.n_bins()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{name} is {got}, expected {want}")));
            }
        }
        if self.vqvae.num_speakers != 1 {
            return Err(Error::Config("the pipeline trains single-speaker models (L = 1)".into()));
        }
        if self.training.log_every == 0 || self.training.s2s_eval_every == 0 {
            return Err(Error::Config("logging intervals must be positive".into()));
        }
        if !["train", "dev", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("unknown eval split {:?}", self.eval.split)));
        }
        if self.grid.codebook_sizes.is_empty() || self.grid.time_reductions.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        for &k in &self.grid.codebook_sizes {
            self.with_cell(k, self.vqvae.time_reduction).vqvae.validate()?;
        }
        for &r in &self.grid.time_reductions {
            self.with_cell(self.vqvae.codebook_size, r).vqvae.validate()?;
        }
        Ok(())
    }

    /// Parses TOML, fills derived fields and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    /// `output_root` is left out so moving runs does not change the hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_root = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        format!("{digest:x}")[..12].to_string()
    }

    /// `<output_root>/<hash>`
    pub fn default_run_dir(&self) -> PathBuf {
        self.output_root.join(self.hash())
    }
}
