use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{MaterializedNet, NetDims};
use super::train::{TrainStats, TrainedModelRecord};
use super::ZooError;
use crate::archspace::Architecture;
use crate::numerics::checkpoint::{self, decode_f32, encode_f32};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub config_digest: String,
    pub rows: usize,
    pub classes: usize,
    pub stats: TrainStats,
}

impl ZooEntry {
    pub fn of(record: &TrainedModelRecord) -> Self {
        Self {
            id: record.source.clone(),
            train_acc: record.train_acc,
            val_acc: record.val_acc,
            test_acc: record.test_acc,
            config_digest: record.config_digest.clone(),
            rows: record.predictions.rows(),
            classes: record.predictions.cols(),
            stats: record.stats,
        }
    }
}

/// Writes `<zoo>/<id>/checkpoint.{json,bin}` and `<zoo>/<id>/predictions.bin`.
pub fn save_record(zoo: &Path, record: &TrainedModelRecord) -> Result<ZooEntry, ZooError> {
    let dir = zoo.join(&record.source);
    checkpoint::save(&record.params, &dir, "checkpoint")?;
    fs::write(dir.join("predictions.bin"), encode_f32(record.predictions.data()))?;
    let entry = ZooEntry::of(record);
    fs::write(dir.join("entry.json"), serde_json::to_vec_pretty(&entry)?)?;
    Ok(entry)
}

pub fn write_index(zoo: &Path, entries: &[ZooEntry]) -> Result<(), ZooError> {
    fs::create_dir_all(zoo)?;
    fs::write(zoo.join("index.json"), serde_json::to_vec_pretty(entries)?)?;
    Ok(())
}

pub fn read_index(zoo: &Path) -> Result<Vec<ZooEntry>, ZooError> {
    Ok(serde_json::from_slice(&fs::read(zoo.join("index.json"))?)?)
}

pub fn read_entry(zoo: &Path, id: &str) -> Result<ZooEntry, ZooError> {
    Ok(serde_json::from_slice(&fs::read(
        zoo.join(id).join("entry.json"),
    )?)?)
}

/// Loads the stored prediction matrix (f32 precision) of one architecture.
pub fn load_predictions(zoo: &Path, entry: &ZooEntry) -> Result<Tensor, ZooError> {
    let values = decode_f32(&fs::read(zoo.join(&entry.id).join("predictions.bin"))?)?;
    if values.len() != entry.rows * entry.classes {
        return Err(ZooError::Config(format!(
            "predictions for {} hold {} values, expected {}x{}",
            entry.id,
            values.len(),
            entry.rows,
            entry.classes
        )));
    }
    Ok(Tensor::matrix(entry.rows, entry.classes, values)?)
}

/// Rebuilds a trained network from its checkpoint.
pub fn load_net(zoo: &Path, arch: &Architecture, dims: NetDims) -> Result<MaterializedNet, ZooError> {
    let params = checkpoint::load(&zoo.join(&arch.id), "checkpoint")?;
    MaterializedNet::materialize(arch, dims, 0)?.with_params(params)
}
