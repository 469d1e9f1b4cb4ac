//! Self-describing parameter files.
//!
//! Layout: the 8-byte magic `AMCENCKP`, a little-endian `u32` format version, a `u64` header
//! length, the JSON header, then every tensor as little-endian `f64` values in header order.
//! The header carries a SHA-256 of the tensor bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{AmcenError, Result};
use crate::model::{Model, ModelShape};
use crate::params::{ParamGroup, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"AMCENCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: u8,
    pub fingerprint: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Scalar type of the run that wrote the file; values are always stored as `f64`.
    pub scalar: String,
    pub shape: ModelShape,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
}

/// Run metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut blob = Vec::with_capacity(model.store.total_size() * 8);
    let mut tensors = Vec::new();
    for (_, p) in model.store.iter() {
        for &v in p.value.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            rows: p.value.rows(),
            cols: p.value.cols(),
        });
    }
    let header = CheckpointHeader {
        stage: meta.stage,
        fingerprint: model.fingerprint(),
        epoch: meta.epoch,
        metrics: meta.metrics.clone(),
        scalar: T::NAME.to_string(),
        shape: model.shape,
        config: model.config.clone(),
        tensors,
        checksum: format!("{:x}", Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&blob)?;
    f.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> AmcenError {
    AmcenError::Checkpoint(msg.into())
}

/// Reads and integrity-checks a checkpoint without building a model.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParameterStore<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| corrupt(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let blob = &body[header_len..];
    if format!("{:x}", Sha256::digest(blob)) != header.checksum {
        return Err(corrupt("checksum mismatch: parameter data is corrupted"));
    }
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if expected != blob.len() {
        return Err(corrupt(format!(
            "expected {expected} parameter bytes, found {}",
            blob.len()
        )));
    }
    let mut store = ParameterStore::new();
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in &header.tensors {
        let data: Vec<T> = values.by_ref().take(t.rows * t.cols).map(T::of).collect();
        store.insert(
            t.name.clone(),
            t.group,
            Matrix::from_vec(t.rows, t.cols, data)?,
        );
    }
    Ok((header, store))
}

/// Loads a model; refuses a fingerprint different from `expected` unless `force` is set.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&str>,
    force: bool,
) -> Result<(Model<T>, CheckpointHeader)> {
    let (header, store) = read_checkpoint::<T>(path)?;
    let recomputed = header.config.architecture_fingerprint(
        header.shape.entity_count,
        header.shape.base_relation_count,
        header.shape.time_count,
    );
    if recomputed != header.fingerprint {
        return Err(corrupt(
            "stored fingerprint does not match the stored configuration",
        ));
    }
    if let Some(want) = expected {
        if want != header.fingerprint && !force {
            return Err(AmcenError::Fingerprint {
                stored: header.fingerprint.clone(),
                current: want.to_string(),
            });
        }
    }
    let model = Model::from_store(header.config.clone(), header.shape, store)?;
    Ok((model, header))
}
