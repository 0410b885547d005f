//! Ordered subset sampling from selection logits, the regularized
//! surrogate objective, and the three selection strategies built on it.

mod inductive;
mod transductive;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{ApproxError, ModelApproximator};
use crate::digest::digest_f64;
use crate::numerics::functional::{entropy, softmax_slice};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub use inductive::{
    inductive_scores, inductive_select, train_inductive, InductiveConfig, InductiveExample, InductiveReport,
    InductiveScorer, ScorerDims,
};
pub use transductive::{
    hybrid_select, optimize_pi, transductive_select, HybridOutcome, TransductiveConfig, TransductiveOutcome,
};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("index {0} appears more than once")]
    RepeatedIndex(usize),
    #[error("index {index} out of range for {n} instances")]
    OutOfRange { index: usize, n: usize },
    #[error("budget {b} exceeds {n} instances")]
    BudgetTooLarge { b: usize, n: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// An ordered list of chosen training rows plus its provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub arch_id: String,
    pub method: String,
    pub b: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
    pub pi_digest: String,
    pub config_digest: String,
}

impl SubsetSelection {
    pub fn validate(&self, n: usize) -> Result<(), SamplerError> {
        if self.indices.len() != self.b {
            return Err(SamplerError::Config(format!(
                "selection holds {} indices, expected {}",
                self.indices.len(),
                self.b
            )));
        }
        check_ordered(&self.indices, n)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SamplerError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SamplerError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn pi_digest(pi: &[f64]) -> String {
    digest_f64(pi)
}

fn check_ordered(s: &[usize], n: usize) -> Result<(), SamplerError> {
    let mut seen = HashSet::with_capacity(s.len());
    for &i in s {
        if i >= n {
            return Err(SamplerError::OutOfRange { index: i, n });
        }
        if !seen.insert(i) {
            return Err(SamplerError::RepeatedIndex(i));
        }
    }
    Ok(())
}

fn check_budget(b: usize, n: usize) -> Result<(), SamplerError> {
    if b > n {
        return Err(SamplerError::BudgetTooLarge { b, n });
    }
    Ok(())
}

fn log_sum_exp_where(pi: &[f64], keep: &[bool]) -> f64 {
    let m = pi
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = pi
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| (v - m).exp())
        .sum();
    m + s.ln()
}

/// Log-probability of drawing the ordered list `s` by sequential sampling
/// without replacement, each step proportional to `exp(pi)`.
pub fn sequence_log_prob(pi: &[f64], s: &[usize]) -> Result<f64, SamplerError> {
    check_ordered(s, pi.len())?;
    let mut remaining = vec![true; pi.len()];
    let mut lp = 0.0;
    for &i in s {
        lp += pi[i] - log_sum_exp_where(pi, &remaining);
        remaining[i] = false;
    }
    Ok(lp)
}

pub fn sequence_prob(pi: &[f64], s: &[usize]) -> Result<f64, SamplerError> {
    Ok(sequence_log_prob(pi, s)?.exp())
}

/// Indices of the `b` largest entries in descending order; ties go to the
/// lower index.
pub fn argtop_b(values: &[f64], b: usize) -> Result<Vec<usize>, SamplerError> {
    check_budget(b, values.len())?;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(b);
    Ok(idx)
}

/// Exact draw of `b` ordered indices via Gumbel perturbation of `pi`.
pub fn sample_subset(pi: &[f64], b: usize, seed: u64) -> Result<Vec<usize>, SamplerError> {
    check_budget(b, pi.len())?;
    let gumbel = Gumbel::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed: Vec<f64> = pi.iter().map(|p| p + gumbel.sample(&mut rng)).collect();
    argtop_b(&perturbed, b)
}

/// Entropy of the single-draw categorical `softmax(pi)`.
pub fn sampler_entropy(pi: &[f64]) -> f64 {
    if pi.is_empty() {
        return 0.0;
    }
    entropy(&softmax_slice(pi))
}

/// `b * sum_i softmax(pi)_i * loss_i - lambda * entropy(softmax(pi))`.
pub fn surrogate_loss(pi: &[f64], losses: &[f64], b: usize, lambda: f64) -> f64 {
    let p = softmax_slice(pi);
    let expected: f64 = p.iter().zip(losses).map(|(a, l)| a * l).sum();
    b as f64 * expected - lambda * entropy(&p)
}

/// Tape form of [`surrogate_loss`] for a `1 x n` logit row.
pub fn surrogate_var(tape: &mut Tape, pi: Var, losses: &[f64], b: usize, lambda: f64) -> Var {
    let p = tape.softmax_rows(pi);
    let lp = tape.log_softmax_rows(pi);
    let weighted = tape.mul_const(p, Tensor::row(losses));
    let expected = tape.sum(weighted);
    let expected = tape.scale(expected, b as f64);
    if lambda == 0.0 {
        return expected;
    }
    let plogp = tape.mul(p, lp);
    let neg_h = tape.sum(plogp);
    let reg = tape.scale(neg_h, lambda);
    tape.add(expected, reg)
}

/// How the expected loss of a drawn subset is approximated while
/// optimizing logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// `b` times the loss expected under a single draw; see [`surrogate_loss`].
    #[default]
    MeanField,
    /// Loss weighted by approximate inclusion probabilities of the `b`
    /// draws; see [`inclusion_loss`].
    Inclusion,
}

fn inclusion_at(pi: &[f64], tau: f64) -> impl Iterator<Item = f64> + '_ {
    pi.iter().map(move |p| -(-(p - tau).exp()).exp_m1())
}

/// Threshold `tau` with `sum_i 1 - exp(-exp(pi_i - tau)) = b`. Each term is
/// the chance that `pi_i` plus standard Gumbel noise clears `tau`, so the
/// terms approximate the inclusion probabilities of a Gumbel-top-b draw.
/// Requires `0 < b < pi.len()`.
pub fn inclusion_threshold(pi: &[f64], b: usize) -> f64 {
    let target = b as f64;
    let total = |tau: f64| inclusion_at(pi, tau).sum::<f64>();
    let max = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hi = max + (pi.len() as f64).ln() + 1.0;
    let mut lo = pi.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut step = 1.0;
    while total(lo) < target {
        step *= 2.0;
        lo -= step;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Approximate probability that each index is among `b` Gumbel-top-b
/// draws; the values lie in `[0, 1]` and sum to `b`.
pub fn inclusion_probs(pi: &[f64], b: usize) -> Vec<f64> {
    if b == 0 {
        return vec![0.0; pi.len()];
    }
    if b >= pi.len() {
        return vec![1.0; pi.len()];
    }
    inclusion_at(pi, inclusion_threshold(pi, b)).collect()
}

/// `sum_i q_i * loss_i - lambda * entropy(softmax(pi))` with `q` from
/// [`inclusion_probs`].
pub fn inclusion_loss(pi: &[f64], losses: &[f64], b: usize, lambda: f64) -> f64 {
    let q = inclusion_probs(pi, b);
    let expected: f64 = q.iter().zip(losses).map(|(a, l)| a * l).sum();
    expected - lambda * sampler_entropy(pi)
}

/// Tape form of [`inclusion_loss`]. The threshold depends on `pi`; its
/// implicit derivative is folded in by centring the losses at the
/// `dq/dpi`-weighted mean loss.
pub fn inclusion_var(tape: &mut Tape, pi: Var, losses: &[f64], b: usize, lambda: f64) -> Var {
    let values = tape.value(pi).data().to_vec();
    let n = values.len();
    let expected = if b == 0 || b >= n {
        let constant: f64 = if b == 0 { 0.0 } else { losses.iter().sum() };
        let zero = tape.mul_const(pi, Tensor::zeros(1, n));
        let zero = tape.sum(zero);
        tape.add_scalar(zero, constant)
    } else {
        let tau = inclusion_threshold(&values, b);
        let slopes: Vec<f64> = values
            .iter()
            .map(|p| {
                let u = (p - tau).exp();
                u * (-u).exp()
            })
            .collect();
        let mass: f64 = slopes.iter().sum();
        let centre = if mass > 0.0 {
            slopes.iter().zip(losses).map(|(s, l)| s * l).sum::<f64>() / mass
        } else {
            0.0
        };
        let shifted = tape.add_scalar(pi, -tau);
        let u = tape.exp(shifted);
        let neg_u = tape.scale(u, -1.0);
        let e = tape.exp(neg_u);
        let neg_e = tape.scale(e, -1.0);
        let q = tape.add_scalar(neg_e, 1.0);
        let centred: Vec<f64> = losses.iter().map(|l| l - centre).collect();
        let weighted = tape.mul_const(q, Tensor::row(&centred));
        let total = tape.sum(weighted);
        tape.add_scalar(total, centre * b as f64)
    };
    if lambda == 0.0 {
        return expected;
    }
    let p = tape.softmax_rows(pi);
    let lp = tape.log_softmax_rows(pi);
    let plogp = tape.mul(p, lp);
    let neg_h = tape.sum(plogp);
    let reg = tape.scale(neg_h, lambda);
    tape.add(expected, reg)
}

pub fn objective_loss(kind: Surrogate, pi: &[f64], losses: &[f64], b: usize, lambda: f64) -> f64 {
    match kind {
        Surrogate::MeanField => surrogate_loss(pi, losses, b, lambda),
        Surrogate::Inclusion => inclusion_loss(pi, losses, b, lambda),
    }
}

pub fn objective_var(
    kind: Surrogate,
    tape: &mut Tape,
    pi: Var,
    losses: &[f64],
    b: usize,
    lambda: f64,
) -> Var {
    match kind {
        Surrogate::MeanField => surrogate_var(tape, pi, losses, b, lambda),
        Surrogate::Inclusion => inclusion_var(tape, pi, losses, b, lambda),
    }
}

/// Approximator outputs and per-instance losses of one architecture on the
/// training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceView {
    pub probs: Tensor,
    pub losses: Vec<f64>,
}

impl InstanceView {
    pub fn compute(
        approx: &ModelApproximator,
        ordered_h: &Tensor,
        features: &Tensor,
        labels: &[usize],
    ) -> Result<Self, SamplerError> {
        let probs = approx.predict_rows(ordered_h, features)?;
        let losses = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.get(r, y).ln())
            .collect();
        Ok(Self { probs, losses })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

#[cfg(test)]
mod tests;
