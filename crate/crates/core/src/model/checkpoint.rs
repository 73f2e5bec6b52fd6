//! Binary checkpoint: 8-byte magic, little-endian `u64` header length, a
//! JSON header naming every tensor and its shape, then the tensors as
//! little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAPFCKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named();
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + named.iter().map(|(_, t)| 8 * t.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
        let mut params = ModelParams::init(&header.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the model config"));
        }
        let mut off = 16 + hlen;
        for ((name, shape), (entry, slot)) in expected.iter().zip(header.tensors.iter().zip(params.tensors_mut())) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::format(
                    path,
                    format!("expected tensor {name} {shape:?}, found {} {:?}", entry.name, entry.shape),
                ));
            }
            let n: usize = shape.iter().product();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *slot = Tensor::new(shape, data)?;
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            config_hash: header.config_hash,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ModalityMask;
    use crate::model::infer;
    use crate::scene::{generate_scene, SceneConfig};

    fn ckpt() -> Checkpoint {
        let config = ModelConfig::default();
        Checkpoint {
            params: ModelParams::init(&config, 11).unwrap(),
            config,
            seed: 11,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        let s = generate_scene(2, &SceneConfig::default()).unwrap();
        let a = infer(&c.params, &c.config, &s.cameras, &s.lidar, Some(ModalityMask::Both)).unwrap();
        let b = infer(&back.params, &back.config, &s.cameras, &s.lidar, Some(ModalityMask::Both)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = Path::new("x.ckpt");
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, p).is_err());
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan, p).is_err());
    }
}
