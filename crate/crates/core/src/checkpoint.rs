//! Versioned model checkpoint container.
//!
//! ```text
//! magic    b"SP2K"
//! version  u32 = 1
//! model    u8   (1 vqvae, 2 s2s, 3 inverter)
//! cfg_len  u32, then cfg_len bytes of UTF-8 JSON (config echo)
//! count    u32
//! count x { name_len u32, name bytes, SP2C tensor record }
//! ```
//!
//! Records are written in name order, so saving the same parameters twice
//! gives identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::io::{read_u32, TensorRecord};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SP2K";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    VqVae = 1,
    S2s = 2,
    Inverter = 3,
}

impl ModelKind {
    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ModelKind::VqVae),
            2 => Some(ModelKind::S2s),
            3 => Some(ModelKind::Inverter),
            _ => None,
        }
    }
}

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_json: String,
    pub tensors: TensorMap,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (dims, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rec = TensorRecord {
                kind: FeatureKind::Raw,
                dims: dims.clone(),
                data: data.clone(),
            };
            rec.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, not a checkpoint".into()));
        }
        let version = read_u32(r).map_err(|_| bad("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(|_| bad("truncated header".into()))?;
        let kind = ModelKind::from_code(kind[0]).ok_or_else(|| bad("unknown model kind".into()))?;
        let cfg_len = read_u32(r).map_err(|_| bad("truncated header".into()))? as usize;
        if cfg_len > 1 << 24 {
            return Err(bad("config echo too large".into()));
        }
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(|_| bad("truncated config".into()))?;
        let config_json = String::from_utf8(cfg).map_err(|_| bad("config is not UTF-8".into()))?;
        let count = read_u32(r).map_err(|_| bad("truncated tensor count".into()))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r).map_err(|_| bad("truncated tensor name".into()))? as usize;
            if len > 4096 {
                return Err(bad("tensor name too long".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated tensor name".into()))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rec = TensorRecord::read_from(r, origin)?;
            tensors.insert(name, (rec.dims, rec.data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(origin, e))? != 0 {
            return Err(bad("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            kind,
            config_json,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(f), path)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CheckpointMismatch(format!(
                "expected a {:?} checkpoint, found {:?}",
                kind, self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_string(), (vec![2], vec![1.0, 2.0]));
        tensors.insert("a".to_string(), (vec![1, 1], vec![-0.5]));
        Checkpoint {
            kind: ModelKind::S2s,
            config_json: "{\"k\":1}".into(),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::read(&mut &bytes[..], Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampering_is_rejected() {
        let mut bytes = sample().to_bytes();
        let p = Path::new("mem");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(&mut &extra[..], p).is_err());
        assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 2], p).is_err());
        bytes[1] = b'Q';
        assert!(Checkpoint::read(&mut &bytes[..], p).is_err());
    }
}
