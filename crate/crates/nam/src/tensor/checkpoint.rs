//! Versioned JSON checkpoints mapping parameter names to shape + flat data.
//!
//! Values are serialized through serde_json's shortest-roundtrip float
//! encoding, so an f32 checkpoint reloads bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint parse on {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter {name} has {len} values for shape {shape:?}")]
    BadEntry {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: BTreeMap<String, ParamEntry>,
}

pub fn save(path: &Path, params: &[(String, &Tensor<f32>)]) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        params: params
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    let body = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    fs::write(path, body).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>, CheckpointError> {
    let body = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&body).map_err(|source| CheckpointError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.version));
    }
    let mut out = BTreeMap::new();
    for (name, entry) in file.params {
        let tensor = Tensor::new(entry.shape.clone(), entry.data).map_err(|_| {
            CheckpointError::BadEntry {
                name: name.clone(),
                shape: entry.shape,
                len: 0,
            }
        })?;
        out.insert(name, tensor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_in_f32() {
        // Awkward values: subnormals, extremes, and non-terminating decimals.
        let data: Vec<f32> = vec![
            0.1,
            -1.0 / 3.0,
            f32::MIN_POSITIVE,
            1.0e-45,
            3.4e38,
            -0.0,
            1.234_567_9e-12,
            std::f32::consts::PI,
        ];
        let t = Tensor::matrix(2, 4, data.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save(&path, &[("w".to_string(), &t)]).unwrap();
        let loaded = load(&path).unwrap();
        let got = loaded.get("w").unwrap();
        assert_eq!(got.shape(), &[2, 4]);
        for (a, b) in got.data().iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        fs::write(&path, r#"{"version":99,"params":{}}"#).unwrap();
        assert!(matches!(
            load(&path).unwrap_err(),
            CheckpointError::Version(99)
        ));
    }
}
