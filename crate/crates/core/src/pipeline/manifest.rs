use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub split: Split,
    /// Absolute, or relative to the manifest's directory.
    pub src_wav: PathBuf,
    pub tgt_wav: PathBuf,
    pub transcript_src: Option<String>,
    pub transcript_tgt: Option<String>,
}

/// Paired source/target utterances.
///
/// Stored as a tab-separated file with the header
/// `utt_id split src_wav tgt_wav transcript_src transcript_tgt`; empty
/// transcript cells mean "none".
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const HEADER: [&str; 6] = ["utt_id", "split", "src_wav", "tgt_wav", "transcript_src", "transcript_tgt"];

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.utt_id.is_empty() || e.utt_id.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("bad utterance id {:?}", e.utt_id)));
            }
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate utterance id {}", e.utt_id)));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Reads a manifest and checks that every referenced WAV exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?
            .1
            .split('\t')
            .collect();
        if header != HEADER {
            return Err(Error::format(path, format!("header must be {:?}", HEADER.join("\t"))));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != HEADER.len() {
                return Err(Error::format(
                    path,
                    format!("line {}: {} columns, expected {}", i + 1, cells.len(), HEADER.len()),
                ));
            }
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_owned());
            entries.push(ManifestEntry {
                utt_id: cells[0].to_owned(),
                split: cells[1]
                    .parse()
                    .map_err(|e: Error| Error::format(path, format!("line {}: {e}", i + 1)))?,
                src_wav: cells[2].into(),
                tgt_wav: cells[3].into(),
                transcript_src: opt(cells[4]),
                transcript_tgt: opt(cells[5]),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(root, entries)?;
        for e in &m.entries {
            for p in [m.src_path(e), m.tgt_path(e)] {
                if !p.is_file() {
                    return Err(Error::MissingArtifact(format!(
                        "{}: audio for {} not found at {}",
                        path.display(),
                        e.utt_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = HEADER.join("\t");
        out.push('\n');
        for e in &self.entries {
            let row = [
                e.utt_id.as_str(),
                e.split.as_str(),
                &e.src_wav.to_string_lossy(),
                &e.tgt_wav.to_string_lossy(),
                e.transcript_src.as_deref().unwrap_or(""),
                e.transcript_tgt.as_deref().unwrap_or(""),
            ]
            .join("\t");
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn src_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.src_wav)
    }

    pub fn tgt_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.tgt_wav)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|(_, e)| e.utt_id.clone()).collect()
    }
}
