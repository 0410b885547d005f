//! Parameter checkpoints: a JSON manifest next to a flat little-endian
//! `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>, NumericsError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(NumericsError::Checkpoint(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn save(params: &ParamSet, dir: &Path, stem: &str) -> Result<(), NumericsError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        blob.extend(encode_f32(p.value.data()));
    }
    let (json, bin) = paths(dir, stem);
    let manifest = serde_json::to_string_pretty(&Manifest { tensors })
        .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    fs::write(json, manifest)?;
    fs::write(bin, blob)?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<ParamSet, NumericsError> {
    let (json, bin) = paths(dir, stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&json)?)
        .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", json.display())))?;
    let blob = fs::read(&bin)?;
    let mut params = ParamSet::new();
    for entry in manifest.tensors {
        if entry.dtype != "f32" {
            return Err(NumericsError::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len * 4;
        if end > blob.len() {
            return Err(NumericsError::Checkpoint(format!(
                "{}: blob too short ({} < {end})",
                entry.name,
                blob.len()
            )));
        }
        let values = decode_f32(&blob[entry.offset..end])?;
        params.add(entry.name, Tensor::new(entry.shape, values)?)?;
    }
    Ok(params)
}
