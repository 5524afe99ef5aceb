//! Versioned checkpoint container.
//!
//! ```text
//! magic          8 bytes  "SFWMCKPT"
//! version        u32 LE   1
//! manifest_len   u64 LE
//! manifest       JSON (CheckpointManifest)
//! payload        f32 LE values of every tensor, in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelBundle};
use crate::error::{Error, Result};
use crate::nn::HasTensors;
use crate::util::{sha256_hex, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFWMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ArchConfig,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub bundle: ModelBundle<f32>,
}

impl Checkpoint {
    pub fn new(bundle: ModelBundle<f32>, config_hash: impl Into<String>) -> Self {
        let tensors = bundle
            .tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.shape,
                trainable: t.trainable,
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                dtype: "f32le".into(),
                arch: bundle.arch,
                config_hash: config_hash.into(),
                tensors,
            },
            bundle,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.bundle.tensors() {
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(b8) as usize;
        if r.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if manifest.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }

        let mut bundle = ModelBundle::<f32>::zeros(manifest.arch);
        {
            let targets = bundle.tensors_mut();
            if targets.len() != manifest.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "manifest lists {} tensors, architecture has {}",
                    manifest.tensors.len(),
                    targets.len()
                )));
            }
            for (dst, entry) in targets.into_iter().zip(&manifest.tensors) {
                if dst.name != entry.name || dst.shape != entry.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        entry.name, entry.shape, dst.name, dst.shape
                    )));
                }
                let need = dst.data.len() * 4;
                if r.len() < need {
                    return Err(bad("truncated payload"));
                }
                for (d, chunk) in dst.data.iter_mut().zip(r[..need].chunks_exact(4)) {
                    *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                r = &r[need..];
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { manifest, bundle })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |f| f.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig {
            width: 4,
            watermark_len: 30,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = Checkpoint::new(ModelBundle::init(small(), 3), "abc");
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.bundle, ck.bundle);
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.config_hash(), "abc");
    }

    #[test]
    fn file_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(ModelBundle::init(small(), 4), "h");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.digest().unwrap(), ck.digest().unwrap());
        assert_eq!(sha256_hex(&std::fs::read(&path).unwrap()), ck.digest().unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = Checkpoint::new(ModelBundle::init(small(), 3), "abc");
        let mut bytes = ck.to_bytes().unwrap();
        // rewrite the manifest with a wrong shape, same byte length
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let tampered = text.replacen("[4,3,3,3]", "[3,4,3,3]", 1);
        assert_ne!(tampered, text);
        bytes[20..20 + len].copy_from_slice(tampered.as_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let ck = Checkpoint::new(ModelBundle::init(small(), 3), "abc");
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!garbage!").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
