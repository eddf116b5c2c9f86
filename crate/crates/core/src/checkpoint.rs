//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MEXGANCK"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON: {version, config, palette, epoch, step,
//!                    tensors: [{name, shape: [c, h, w]}]}
//! payload  f64 values of every tensor, in header order
//! ```
//!
//! Readers ignore unknown header fields, so later writers may add metadata
//! without bumping the version; a version newer than [`VERSION`] is refused.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ColorPalette;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MEXGANCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub palette: Option<ColorPalette>,
    pub epoch: usize,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    palette: Option<ColorPalette>,
    epoch: usize,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            palette: self.palette.clone(),
            epoch: self.epoch,
            step: self.step,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: [t.channels(), t.height(), t.width()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| bad("truncated version".into()))?;
        let version = u32::from_le_bytes(v);
        if version == 0 || version > VERSION {
            return Err(bad(format!("unsupported version {version} (this build reads up to {VERSION})")));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l).map_err(|_| bad("truncated header length".into()))?;
        let hlen = u64::from_le_bytes(l) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        r = &r[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let [c, h, w] = entry.shape;
            let n = c * h * w;
            if r.len() < 8 * n {
                return Err(bad(format!("payload truncated at {}", entry.name)));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[8 * n..];
            tensors.push((entry.name, Tensor::from_vec(c, h, w, data)?));
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config: header.config,
            palette: header.palette,
            epoch: header.epoch,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Tensors whose name starts with `prefix`, prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: TrainConfig::default(),
            palette: Some(ColorPalette::synthetic()),
            epoch: 3,
            step: 17,
            tensors: vec![
                ("g/a".into(), Tensor::from_fn(2, 3, 4, |c, r, w| (c * 100 + r * 10 + w) as f64 * 0.1)),
                ("d/b".into(), Tensor::filled(1, 1, 5, -2.5)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert_eq!(ck.group("g/").len(), 1);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        let o = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], o).is_err());
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(Checkpoint::from_bytes(&future, o).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!garbage!garbage!", o).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, o).is_err());
    }
}
