//! Checkpoint container.
//!
//! ```text
//! u64 LE   header length in bytes
//! [u8]     JSON header
//! [u8]     payload, tensors concatenated row-major in TENSOR_NAMES order
//! ```
//!
//! Model checkpoints store an `f32le` payload. Trainer state files use the
//! same container with an `f64le` payload so resumed runs are exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, TagUsage, Temperatures, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const CHECKPOINT_FORMAT: &str = "macvr-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    F64le,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: Dtype,
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub seed: u64,
    pub step: usize,
    pub temperatures: Temperatures,
    pub tags: TagUsage,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointHeader {
    pub fn for_params(params: &ModelParams, dtype: Dtype, seed: u64, step: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            dtype,
            d: params.d,
            k: params.k,
            hidden: super::params::MLP_HIDDEN,
            seed,
            step,
            temperatures: params.temperatures,
            tags: params.tags,
            tensors: params
                .tensors()
                .iter()
                .zip(TENSOR_NAMES)
                .map(|(t, name)| TensorInfo {
                    name: name.into(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        }
    }
}

/// Encodes tensors into a payload of the given dtype.
pub(crate) fn encode_payload<'a>(tensors: impl IntoIterator<Item = &'a Matrix>, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for &x in t.data() {
            match dtype {
                Dtype::F32le => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64le => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

/// Splits a payload into tensors of the given shapes.
pub(crate) fn decode_payload(payload: &[u8], dtype: Dtype, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
    let width = dtype.width();
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if payload.len() != total * width {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            total * width
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for &(rows, cols) in shapes {
        let bytes = &payload[offset..offset + rows * cols * width];
        offset += bytes.len();
        let data: Vec<f64> = match dtype {
            Dtype::F32le => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64le => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter value".into()));
        }
        out.push(Matrix::new(rows, cols, data)?);
    }
    Ok(out)
}

pub(crate) fn write_container(path: &Path, header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(format!("{} is too short", path.display())));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint(format!("{} has a truncated header", path.display())))?;
    let header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    Ok((header, bytes[8 + len..].to_vec()))
}

/// Writes `params` as an `f32le` checkpoint.
pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, step: usize) -> Result<()> {
    let header = CheckpointHeader::for_params(params, Dtype::F32le, seed, step);
    write_container(path, &header, &encode_payload(params.tensors(), Dtype::F32le))
}

/// `params` exactly as a save/load round trip returns them.
pub fn stored_precision(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
    out
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let (header, payload): (CheckpointHeader, _) = read_container(path)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", header.format)));
    }
    super::params::check_dims(header.d, header.k)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let shapes = ModelParams::expected_shapes(header.d, header.k);
    let tensors = decode_payload(&payload, header.dtype, &shapes)?;
    let params = ModelParams::from_tensors(header.d, header.k, tensors, header.temperatures, header.tags)?;
    Ok((header, params))
}
