use serde::{Deserialize, Serialize};

use super::{
    argtop_b, check_budget, objective_var, pi_digest, sample_subset, InstanceView, SamplerError,
    SubsetSelection, Surrogate,
};
use crate::digest::{derive_seed, digest_json};
use crate::numerics::{grad_evaluations, GradTag, OptimizerConfig, OptimizerState, ParamSet, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransductiveConfig {
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub surrogate: Surrogate,
}

impl Default for TransductiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 0.05,
            steps: 200,
            surrogate: Surrogate::MeanField,
        }
    }
}

/// Minimizes the surrogate over logits starting from zero; returns the
/// logits and the number of gradient evaluations spent.
pub fn optimize_pi(
    losses: &[f64],
    b: usize,
    cfg: &TransductiveConfig,
) -> Result<(Vec<f64>, u64), SamplerError> {
    check_budget(b, losses.len())?;
    if losses.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut params = ParamSet::new();
    let id = params.add("pi", Tensor::zeros(1, losses.len()))?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), &params);
    let before = grad_evaluations(GradTag::Surrogate);
    for _ in 0..cfg.steps {
        let mut tape = Tape::with_tag(GradTag::Surrogate);
        let bound = params.bind(&mut tape);
        let loss = objective_var(cfg.surrogate, &mut tape, bound.get(id), losses, b, cfg.lambda);
        let grads = tape.backward(loss)?;
        params.store_grads(&bound, &grads);
        opt.step(&mut params)?;
    }
    let spent = grad_evaluations(GradTag::Surrogate) - before;
    Ok((params.get(id).value.data().to_vec(), spent))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransductiveOutcome {
    /// Draw from the optimized sampler.
    pub sampled: SubsetSelection,
    /// The `b` largest optimized logits.
    pub argtop: SubsetSelection,
    pub pi: Vec<f64>,
    pub grad_evals: u64,
}

pub fn transductive_select(
    arch_id: &str,
    view: &InstanceView,
    b: usize,
    seed: u64,
    cfg: &TransductiveConfig,
) -> Result<TransductiveOutcome, SamplerError> {
    let (pi, grad_evals) = optimize_pi(&view.losses, b, cfg)?;
    let digest = pi_digest(&pi);
    let config_digest = digest_json(cfg);
    let make = |method: &str, indices: Vec<usize>| SubsetSelection {
        arch_id: arch_id.to_string(),
        method: method.to_string(),
        b,
        seed,
        indices,
        pi_digest: digest.clone(),
        config_digest: config_digest.clone(),
    };
    Ok(TransductiveOutcome {
        sampled: make("transductive", sample_subset(&pi, b, seed)?),
        argtop: make("transductive-argtop", argtop_b(&pi, b)?),
        pi,
        grad_evals,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridOutcome {
    pub superset: Vec<usize>,
    pub selection: SubsetSelection,
    pub grad_evals: u64,
}

/// Refines a superset of size `B` from the inductive logits down to `b`
/// rows with the transductive optimization restricted to the superset.
///
/// The superset is put in ascending index order first, so a superset equal
/// to every row reproduces [`transductive_select`] exactly. When `B == b`
/// the superset is returned unchanged.
pub fn hybrid_select(
    arch_id: &str,
    inductive_pi: &[f64],
    view: &InstanceView,
    big_b: usize,
    b: usize,
    seed: u64,
    cfg: &TransductiveConfig,
) -> Result<HybridOutcome, SamplerError> {
    if b > big_b {
        return Err(SamplerError::Config(format!(
            "final budget {b} exceeds superset size {big_b}"
        )));
    }
    let n = view.len();
    check_budget(big_b, n)?;
    if inductive_pi.len() != n {
        return Err(SamplerError::Config(format!(
            "{} inductive logits for {} instances",
            inductive_pi.len(),
            n
        )));
    }
    let superset = sample_subset(inductive_pi, big_b, derive_seed(seed, "hybrid-superset"))?;
    let config_digest = digest_json(&(cfg, big_b));
    if big_b == b {
        return Ok(HybridOutcome {
            selection: SubsetSelection {
                arch_id: arch_id.to_string(),
                method: "hybrid".into(),
                b,
                seed,
                indices: superset.clone(),
                pi_digest: pi_digest(inductive_pi),
                config_digest,
            },
            superset,
            grad_evals: 0,
        });
    }
    let mut domain = superset.clone();
    domain.sort_unstable();
    let losses: Vec<f64> = domain.iter().map(|&i| view.losses[i]).collect();
    let (pi, grad_evals) = optimize_pi(&losses, b, cfg)?;
    let local = sample_subset(&pi, b, seed)?;
    Ok(HybridOutcome {
        selection: SubsetSelection {
            arch_id: arch_id.to_string(),
            method: "hybrid".into(),
            b,
            seed,
            indices: local.into_iter().map(|k| domain[k]).collect(),
            pi_digest: pi_digest(&pi),
            config_digest,
        },
        superset,
        grad_evals,
    })
}
