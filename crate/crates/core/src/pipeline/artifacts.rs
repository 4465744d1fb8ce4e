use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::ExperimentConfig;
use super::manifest::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Layout of a run directory. Every file a stage writes lives under `root`
/// and every log line carries the config hash and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub root: PathBuf,
    pub provenance: Provenance,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl RunArtifacts {
    /// Creates (or reopens) the run directory for `cfg`. A directory that
    /// already holds a different configuration is refused.
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let cfg_path = root.join("config.toml");
        if cfg_path.is_file() {
            let existing = ExperimentConfig::load(&cfg_path)?;
            if existing.hash() != hash {
                return Err(Error::Config(format!(
                    "{} belongs to config {}, not {hash}",
                    root.display(),
                    existing.hash()
                )));
            }
        } else {
            mkdir(root)?;
            cfg.save(&cfg_path)?;
        }
        let provenance = Provenance {
            config_hash: hash,
            seed: cfg.seed,
        };
        let prov_path = root.join("provenance.json");
        std::fs::write(&prov_path, serde_json::to_string_pretty(&provenance)?).map_err(|e| Error::io(&prov_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
        })
    }

    /// Opens an existing run directory and returns its stored config.
    pub fn open(root: &Path) -> Result<(Self, ExperimentConfig)> {
        let cfg_path = root.join("config.toml");
        if !cfg_path.is_file() {
            return Err(Error::MissingArtifact(format!(
                "{} is not a run directory (no config.toml)",
                root.display()
            )));
        }
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let run = Self {
            root: root.to_path_buf(),
            provenance: Provenance {
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
        };
        Ok((run, cfg))
    }

    pub fn config_hash(&self) -> &str {
        &self.provenance.config_hash
    }

    pub fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.root.join(sub);
        mkdir(&d)?;
        Ok(d)
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn stats_path(&self, name: &str) -> PathBuf {
        self.root.join("stats").join(format!("{name}.sp2c"))
    }

    pub fn vqvae_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/vqvae.ckpt")
    }

    pub fn inverter_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/inverter.ckpt")
    }

    pub fn s2s_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/s2s.ckpt")
    }

    /// Stage-1 target codes, one utterance per line.
    pub fn codes_path(&self, split: Split) -> PathBuf {
        self.root.join("codes").join(format!("{split}.codes"))
    }

    /// Utterance ids, line-aligned with [`Self::codes_path`].
    pub fn code_ids_path(&self, split: Split) -> PathBuf {
        self.root.join("codes").join(format!("{split}.ids"))
    }

    pub fn metrics_path(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }

    pub fn inference_dir(&self, split: Split) -> PathBuf {
        self.root.join("inference").join(split.as_str())
    }

    pub fn inference_codes_path(&self, split: Split) -> PathBuf {
        self.root.join("inference").join(format!("{split}.codes"))
    }

    pub fn inference_ids_path(&self, split: Split) -> PathBuf {
        self.root.join("inference").join(format!("{split}.ids"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics_log(&self, stage: &'static str) -> Result<MetricsLog> {
        let path = self.metrics_path(stage);
        if let Some(p) = path.parent() {
            mkdir(p)?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            out: BufWriter::new(file),
            path,
            stage,
            provenance: self.provenance.clone(),
        })
    }
}

/// Line-delimited JSON records. Lines hold no timing so reruns compare
/// byte for byte.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
    stage: &'static str,
    provenance: Provenance,
}

impl MetricsLog {
    pub fn write(&mut self, kind: &str, record: &impl Serialize) -> Result<()> {
        let mut obj = match serde_json::to_value(record)? {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("config_hash".into(), self.provenance.config_hash.clone().into());
        obj.insert("seed".into(), self.provenance.seed.into());
        obj.insert("stage".into(), self.stage.into());
        obj.insert("kind".into(), kind.into());
        let line = serde_json::to_string(&Value::Object(obj))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
