use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::net::MaterializedNet;
use super::ZooError;
use crate::digest::digest_json;
use crate::numerics::{GradTag, OptimizerConfig, OptimizerState, ParamSet, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: u64,
    /// Backward passes through the network.
    pub grad_evals: u64,
    pub seconds: f64,
    pub final_loss: f64,
}

/// Cross-entropy training with Adam on the rows in `subset`.
///
/// The subset is treated as a set: it is sorted before use, so any ordering
/// of the same indices trains identically.
pub fn train_net(
    net: &mut MaterializedNet,
    data: &DatasetBundle,
    subset: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainStats, ZooError> {
    if data.d_x() != net.dims.d_x || data.classes != net.dims.classes {
        return Err(ZooError::Config(format!(
            "net dims {:?} do not match data (d_x {}, classes {})",
            net.dims,
            data.d_x(),
            data.classes
        )));
    }
    let start = Instant::now();
    let mut rows = subset.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), &net.params);
    let mut stats = TrainStats::default();
    let batch = cfg.batch_size.max(1);
    for _epoch in 0..cfg.epochs {
        let mut order = rows.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::with_tag(GradTag::ModelTraining);
            let bound = net.params.bind(&mut tape);
            let x = tape.constant(data.feature_matrix(chunk));
            let (logits, _) = net.forward(&mut tape, &bound, x);
            let lp = tape.log_softmax_rows(logits);
            let picked = tape.pick(lp, &data.labels_of(chunk));
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            let grads = tape.backward(loss).map_err(|e| ZooError::Diverged {
                arch: net.source.clone(),
                step: stats.steps,
                reason: e.to_string(),
            })?;
            net.params.store_grads(&bound, &grads);
            opt.step(&mut net.params).map_err(|e| ZooError::Diverged {
                arch: net.source.clone(),
                step: stats.steps,
                reason: e.to_string(),
            })?;
            stats.steps += 1;
            stats.grad_evals += 1;
            stats.final_loss = tape.scalar(loss);
        }
    }
    stats.seconds = start.elapsed().as_secs_f64();
    Ok(stats)
}

pub fn accuracy(net: &MaterializedNet, data: &DatasetBundle, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let p = net.predict_proba(&data.feature_matrix(idx));
    let correct = idx
        .iter()
        .enumerate()
        .filter(|(r, &i)| argmax(p.row_slice(*r)) == data.labels[i])
        .count();
    correct as f64 / idx.len() as f64
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Trained parameters of one architecture and its softmax outputs on the
/// training rows, in training-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModelRecord {
    pub source: String,
    pub params: ParamSet,
    pub predictions: Tensor,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub config_digest: String,
    pub stats: TrainStats,
}

/// Trains on the training split and records predictions on it.
///
/// Parameters are rounded to checkpoint precision before predictions are
/// taken, so reloading the checkpoint reproduces them exactly.
pub fn pretrain(
    mut net: MaterializedNet,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModelRecord, ZooError> {
    let train = data.train_indices();
    let stats = train_net(&mut net, data, &train, cfg, seed)?;
    net.params.round_to_f32();
    let predictions = net.predict_proba(&data.feature_matrix(&train));
    Ok(TrainedModelRecord {
        source: net.source.clone(),
        train_acc: accuracy(&net, data, &train),
        val_acc: accuracy(&net, data, &data.val_indices()),
        test_acc: accuracy(&net, data, &data.test_indices()),
        predictions,
        params: net.params,
        config_digest: cfg.digest(),
        stats,
    })
}
