//! Single-file checkpoints: `{format, version, checksum, params: [{name, shape, values}]}`.
//!
//! Field order is fixed by the struct layout and the checksum is the SHA-256
//! of the compact JSON encoding of `params`, so equal parameters give
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::params::ParamStore;
use super::AutodiffError;

pub const CHECKPOINT_FORMAT: &str = "dadapt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is malformed: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint {path} failed integrity check: stored {stored}, computed {computed}")]
    Integrity {
        path: PathBuf,
        stored: String,
        computed: String,
    },
    #[error("checkpoint does not fit the model: {0}")]
    Params(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub checksum: String,
    pub params: Vec<ParamRecord>,
}

fn digest(params: &[ParamRecord]) -> String {
    let bytes = serde_json::to_vec(params).expect("parameter records serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let params: Vec<ParamRecord> = store
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.data.clone(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            checksum: digest(&params),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Malformed {
                path: path.to_path_buf(),
                reason: format!("unexpected format tag {:?}", ckpt.format),
            });
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let computed = digest(&ckpt.params);
        if computed != ckpt.checksum {
            return Err(CheckpointError::Integrity {
                path: path.to_path_buf(),
                stored: ckpt.checksum,
                computed,
            });
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Overwrites the values of `store`; every parameter must be present with its shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        store.load_values(
            self.params
                .iter()
                .map(|r| (r.name.as_str(), r.shape.as_slice(), r.values.as_slice())),
        )?;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}
