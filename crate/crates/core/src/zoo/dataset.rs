use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ZooError;
use crate::numerics::Tensor;

/// Variance floor used when standardizing columns.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Features, integer labels and a train/val/test assignment per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Vec<Split>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.indices(Split::Val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    /// Feature rows for `idx` as a matrix.
    pub fn feature_matrix(&self, idx: &[usize]) -> Tensor {
        let d = self.d_x();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.features[i]);
        }
        Tensor::matrix(idx.len(), d, data).expect("non-empty feature selection")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ZooError> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ZooError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Reassigns the labels of a `fraction` of training rows to a different
    /// class chosen uniformly. Validation and test rows are untouched.
    pub fn with_train_label_noise(mut self, fraction: f64, seed: u64) -> Self {
        if fraction <= 0.0 || self.classes < 2 {
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = self.train_indices();
        train.shuffle(&mut rng);
        let flips = (fraction * train.len() as f64).round() as usize;
        for &i in train.iter().take(flips) {
            let shift = rng.gen_range(1..self.classes);
            self.labels[i] = (self.labels[i] + shift) % self.classes;
        }
        self
    }
}

/// Balanced Gaussian clusters with unit covariance. Class `k` is centred at
/// `separation / sqrt(2) * e_k`, so every pair of centres is `separation`
/// apart. Splits are stratified 70/10/20 per class.
pub fn make_blobs(
    n: usize,
    d_x: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<DatasetBundle, ZooError> {
    if classes < 2 {
        return Err(ZooError::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n < 10 * classes {
        return Err(ZooError::Config(format!(
            "n = {n} is below 10 points per class for {classes} classes"
        )));
    }
    if !(separation > 0.0) {
        return Err(ZooError::Config(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if d_x < classes {
        return Err(ZooError::Config(format!(
            "d_x = {d_x} cannot hold {classes} simplex centres"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let features: Vec<Vec<f64>> = labels
        .iter()
        .map(|&k| {
            (0..d_x)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    noise + if j == k { scale } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let mut split = vec![Split::Train; n];
    for k in 0..classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        let (tr, va) = split_sizes(members.len());
        for (pos, &i) in members.iter().enumerate() {
            split[i] = if pos < tr {
                Split::Train
            } else if pos < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(DatasetBundle {
        features,
        labels,
        classes,
        split,
    })
}

/// Train and validation sizes of a 70/10/20 split; test takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let tr = (0.7 * n as f64).round() as usize;
    let va = ((0.1 * n as f64).round() as usize).min(n - tr);
    (tr, va)
}

/// Reads a numeric CSV with a header, standardizes every feature column on
/// the training rows and assigns a seeded 70/10/20 split.
pub fn ingest_csv(path: &Path, label_column: &str, seed: u64) -> Result<DatasetBundle, ZooError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let label_col = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| ZooError::MissingColumn(label_column.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(ZooError::Csv {
                row: r + 1,
                col: record.len(),
                message: format!("expected {} columns", header.len()),
            });
        }
        let mut row = Vec::with_capacity(header.len() - 1);
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| ZooError::Csv {
                row: r + 1,
                col: c,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if c == label_col {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(ZooError::Csv {
                        row: r + 1,
                        col: c,
                        message: format!("label {cell:?} is not a class index"),
                    });
                }
                labels.push(v as usize);
            } else {
                row.push(v);
            }
        }
        features.push(row);
    }
    if labels.is_empty() || features[0].is_empty() {
        return Err(ZooError::Config(
            "csv has no data rows or no feature columns".into(),
        ));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        split[i] = if pos < tr {
            Split::Train
        } else if pos < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut bundle = DatasetBundle {
        features,
        labels,
        classes,
        split,
    };
    standardize(&mut bundle);
    Ok(bundle)
}

fn standardize(bundle: &mut DatasetBundle) {
    let train = bundle.train_indices();
    let d = bundle.d_x();
    let m = train.len().max(1) as f64;
    for j in 0..d {
        let mean = train.iter().map(|&i| bundle.features[i][j]).sum::<f64>() / m;
        let var = train
            .iter()
            .map(|&i| (bundle.features[i][j] - mean).powi(2))
            .sum::<f64>()
            / m;
        let sd = var.max(VARIANCE_FLOOR).sqrt();
        for row in &mut bundle.features {
            row[j] = (row[j] - mean) / sd;
        }
    }
}

/// Writes features as `f0..f{d-1}` columns followed by `label`.
pub fn export_csv(bundle: &DatasetBundle, path: &Path) -> Result<(), ZooError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..bundle.d_x()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in bundle.features.iter().zip(&bundle.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
