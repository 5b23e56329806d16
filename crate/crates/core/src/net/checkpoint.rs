//! Parameter checkpoints: a flat little-endian `f64` binary plus a JSON
//! sidecar listing tensor names, shapes and offsets in storage order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::net::model::NetworkConfig;
use crate::net::params::{ParamSet, TensorShape};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "nld-params-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in values (not bytes).
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub config: NetworkConfig,
}

/// Sidecar path for a checkpoint binary: same stem, `.json` extension.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_checkpoint<T: Scalar>(bin: &Path, config: &NetworkConfig, params: &ParamSet<T>) -> Result<PathBuf> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let len = t.value.rows() * t.value.cols();
            let e = TensorEntry {
                name: t.name.clone(),
                shape: [t.value.rows(), t.value.cols()],
                offset,
                len,
            };
            offset += len;
            e
        })
        .collect();
    let bytes: Vec<u8> = params
        .flatten()
        .into_iter()
        .flat_map(|v| v.to_f64_lossy().to_le_bytes())
        .collect();
    fs::write(bin, bytes)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        tensors,
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| LabError::Parse(e.to_string()))?;
    let side = sidecar_path(bin);
    fs::write(&side, json + "\n")?;
    Ok(side)
}

pub fn read_checkpoint<T: Scalar>(bin: &Path) -> Result<(CheckpointMeta, ParamSet<T>)> {
    let side = sidecar_path(bin);
    let text = fs::read_to_string(&side)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| LabError::Parse(format!("{}: {e}", side.display())))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(LabError::Parse(format!("unsupported checkpoint format {:?}", meta.format)));
    }
    let bytes = fs::read(bin)?;
    if bytes.len() % 8 != 0 {
        return Err(LabError::Parse(format!(
            "checkpoint size {} is not a multiple of 8 bytes",
            bytes.len()
        )));
    }
    let values: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let mut expected = 0;
    for t in &meta.tensors {
        if t.offset != expected || t.len != t.shape[0] * t.shape[1] {
            return Err(LabError::Parse(format!("inconsistent sidecar entry for {}", t.name)));
        }
        expected += t.len;
    }
    let shapes: Vec<TensorShape> = meta
        .tensors
        .iter()
        .map(|t| TensorShape {
            name: t.name.clone(),
            shape: t.shape,
        })
        .collect();
    let params = ParamSet::from_flat(&shapes, &values)?;
    Ok((meta, params))
}
