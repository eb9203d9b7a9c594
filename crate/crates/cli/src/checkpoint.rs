//! Checkpoint files: `ATTCONV1`, an 8-byte little-endian manifest length,
//! a UTF-8 JSON manifest, then every tensor as little-endian `f64` in
//! manifest order.

use std::fs;
use std::path::Path;

use attconv::params::ParamStore;
use attconv::text::Vocabulary;
use attconv::{Model, ModelConfig, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"ATTCONV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: missing ATTCONV1 header")]
    BadMagic,
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u64, expected: u32 },
    #[error("invalid checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(#[from] attconv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .model
            .store
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            vocab: self.model.vocab.tokens().to_vec(),
            labels: self.model.labels.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let floats: usize = self.model.store.iter().map(|(_, _, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, _, t) in self.model.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .ok_or_else(|| CheckpointError::Truncated("no manifest length".into()))?
            .try_into()
            .expect("eight bytes");
        let len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| CheckpointError::Truncated("manifest length overflows".into()))?;
        let manifest_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("manifest of {len} bytes does not fit")))?;
        let raw = &bytes[16..manifest_end];

        let value: serde_json::Value =
            serde_json::from_slice(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let found = value
            .get("format-version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Manifest("missing format-version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let blob = &bytes[manifest_end..];
        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            if e.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let chunk = blob
                .get(start..end)
                .ok_or_else(|| CheckpointError::Truncated(format!("tensor {} needs bytes {start}..{end}", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            store
                .add(e.name.clone(), t)
                .map_err(|_| CheckpointError::Manifest(format!("tensor {} listed twice", e.name)))?;
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(CheckpointError::Manifest(format!(
                "blob has {} bytes, manifest accounts for {expected_offset}",
                blob.len()
            )));
        }
        let vocab = Vocabulary::from_tokens(manifest.vocab)?;
        let model = Model::from_parts(manifest.model_config, vocab, manifest.labels, store)?;
        Ok(Checkpoint {
            model,
            train_config: manifest.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}
