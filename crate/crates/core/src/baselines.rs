//! Reference subset selectors.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::archspace::Architecture;
use crate::digest::digest_json;
use crate::numerics::{grad_evaluations, GradTag, Tape, Tensor};
use crate::sampler::{argtop_b, SamplerError, SubsetSelection};
use crate::zoo::{train_net, DatasetBundle, MaterializedNet, NetDims, TrainConfig, ZooError};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Random,
    FacilityLocation,
    BottomBLoss,
    El2n,
    Grand,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::FacilityLocation => "facility-location",
            Self::BottomBLoss => "bottom-b-loss",
            Self::El2n => "el2n",
            Self::Grand => "grand",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    /// `max_distance - ||x_i - x_j||`.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub warmup_epochs: usize,
    pub gumbel_scale: Option<f64>,
    pub similarity: Similarity,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            gumbel_scale: None,
            similarity: Similarity::Dot,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if let Some(s) = self.gumbel_scale {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(BaselineError::Config(format!("gumbel scale {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn budget(b: usize, n: usize) -> Result<(), BaselineError> {
    if b > n {
        return Err(SamplerError::BudgetTooLarge { b, n }.into());
    }
    Ok(())
}

/// Uniform draw without replacement.
pub fn select_random(n: usize, b: usize, seed: u64) -> Result<Vec<usize>, BaselineError> {
    budget(b, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, n, b).into_vec())
}

pub fn similarity_matrix(features: &Tensor, kind: Similarity) -> Tensor {
    let n = features.rows();
    let mut sim = features.matmul(&features.transpose()).unwrap();
    if kind == Similarity::Euclidean {
        let mut dist = Tensor::zeros(n, n);
        let mut max = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let d = (sim.get(i, i) + sim.get(j, j) - 2.0 * sim.get(i, j))
                    .max(0.0)
                    .sqrt();
                dist.set(i, j, d);
                max = max.max(d);
            }
        }
        sim = dist.map(|d| max - d);
    }
    sim
}

/// `sum_j max_{i in S} sim(i, j)`; zero for the empty set.
pub fn facility_location_value(sim: &Tensor, s: &[usize]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    (0..sim.cols())
        .map(|j| s.iter().map(|&i| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

/// Naive greedy maximization; returns the chosen order and the objective
/// after each addition. Ties go to the lowest index.
pub fn select_facility_location(
    features: &Tensor,
    b: usize,
    kind: Similarity,
) -> Result<(Vec<usize>, Vec<f64>), BaselineError> {
    let n = features.rows();
    budget(b, n)?;
    let sim = similarity_matrix(features, kind);
    let mut best_cover = vec![f64::NEG_INFINITY; n];
    let mut chosen = Vec::with_capacity(b);
    let mut taken = vec![false; n];
    let mut values = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let row = sim.row_slice(i);
            let v: f64 = best_cover.iter().zip(row).map(|(c, s)| c.max(*s)).sum();
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let (i, v) = best.expect("budget checked");
        taken[i] = true;
        chosen.push(i);
        values.push(v);
        for (c, s) in best_cover.iter_mut().zip(sim.row_slice(i)) {
            *c = c.max(*s);
        }
    }
    Ok((chosen, values))
}

/// Ascending sort of the losses, optionally perturbed by Gumbel noise of
/// the given scale; ties go to the lower index.
pub fn select_bottom_b_loss(
    losses: &[f64],
    b: usize,
    gumbel_scale: Option<f64>,
    seed: u64,
) -> Result<Vec<usize>, BaselineError> {
    budget(b, losses.len())?;
    BaselineConfig {
        gumbel_scale,
        ..BaselineConfig::default()
    }
    .validate()?;
    let keys: Vec<f64> = match gumbel_scale {
        Some(scale) if scale > 0.0 => {
            let g = Gumbel::new(0.0, scale).map_err(|e| BaselineError::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            losses.iter().map(|l| -(l + g.sample(&mut rng))).collect()
        }
        _ => losses.iter().map(|l| -l).collect(),
    };
    Ok(argtop_b(&keys, b)?)
}

/// `||p(x) - onehot(y)||_2` per row.
pub fn el2n_scores(probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            probs
                .row_slice(r)
                .iter()
                .enumerate()
                .map(|(c, p)| {
                    let d = p - if c == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Norm of the cross-entropy gradient with respect to the head weight:
/// `||p - onehot(y)|| * ||penultimate||` per row.
pub fn grand_scores(probs: &Tensor, penultimate: &Tensor, labels: &[usize]) -> Vec<f64> {
    el2n_scores(probs, labels)
        .into_iter()
        .enumerate()
        .map(|(r, e)| e * penultimate.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Result of a warm-started scoring baseline.
#[derive(Clone, Debug)]
pub struct ScoredSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Backward passes spent training the warm-up network.
    pub model_grad_evals: u64,
    pub seconds: f64,
}

/// Softmax outputs and penultimate activations on the training rows.
fn forward_train_rows(net: &MaterializedNet, data: &DatasetBundle) -> (Tensor, Tensor) {
    let idx = data.train_indices();
    let mut tape = Tape::new();
    let bound = net.params.bind_frozen(&mut tape);
    let x = tape.constant(data.feature_matrix(&idx));
    let (logits, pen) = net.forward(&mut tape, &bound, x);
    let p = tape.softmax_rows(logits);
    (tape.value(p).clone(), tape.value(pen).clone())
}

/// Trains the architecture for a few epochs on every training row, scores
/// each row and keeps the `b` highest scores. Indices are positions within
/// the training split.
pub fn select_by_difficulty(
    method: BaselineMethod,
    arch: &Architecture,
    dims: NetDims,
    data: &DatasetBundle,
    b: usize,
    warmup_epochs: usize,
    seed: u64,
) -> Result<ScoredSelection, BaselineError> {
    if !matches!(method, BaselineMethod::El2n | BaselineMethod::Grand) {
        return Err(BaselineError::Config(format!(
            "{} is not a difficulty score",
            method.name()
        )));
    }
    let train = data.train_indices();
    budget(b, train.len())?;
    let start = Instant::now();
    let before = grad_evaluations(GradTag::ModelTraining);
    let mut net = MaterializedNet::materialize(arch, dims, seed)?;
    let cfg = TrainConfig {
        epochs: warmup_epochs,
        ..TrainConfig::default()
    };
    train_net(&mut net, data, &train, &cfg, seed)?;
    let (probs, pen) = forward_train_rows(&net, data);
    let labels = data.labels_of(&train);
    let scores = match method {
        BaselineMethod::El2n => el2n_scores(&probs, &labels),
        _ => grand_scores(&probs, &pen, &labels),
    };
    Ok(ScoredSelection {
        indices: argtop_b(&scores, b)?,
        scores,
        model_grad_evals: grad_evaluations(GradTag::ModelTraining) - before,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn selection_record(
    method: BaselineMethod,
    arch_id: &str,
    b: usize,
    seed: u64,
    indices: Vec<usize>,
    config: &BaselineConfig,
) -> SubsetSelection {
    SubsetSelection {
        arch_id: arch_id.to_string(),
        method: method.name().to_string(),
        b,
        seed,
        indices,
        pi_digest: String::new(),
        config_digest: digest_json(config),
    }
}
