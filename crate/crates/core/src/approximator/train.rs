use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ApproxConfig, ApproxDims, ApproxError, ModelApproximator};
use crate::digest::derive_seed;
use crate::numerics::functional::{kl_unchecked, PROB_FLOOR};
use crate::numerics::{GradTag, OptimizerConfig, OptimizerState, Schedule, Tape, Tensor};

/// One architecture's BFS-ordered embeddings and its zoo predictions on
/// the training rows.
#[derive(Clone, Debug)]
pub struct ApproxExample {
    pub arch_id: String,
    pub ordered_h: Tensor,
    pub targets: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApproxTrainReport {
    /// Mean KL over training pairs after each epoch, dropout off.
    pub train_kl: Vec<f64>,
    /// Mean KL over held-out architectures after each epoch.
    pub val_kl: Vec<f64>,
    pub uniform_train_kl: f64,
    pub uniform_val_kl: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub seconds: f64,
}

/// Mean KL of the targets against the uniform distribution.
pub fn kl_uniform(examples: &[ApproxExample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let c = ex.targets.cols();
        let u = vec![1.0 / c as f64; c];
        for r in 0..ex.targets.rows() {
            total += kl_unchecked(ex.targets.row_slice(r), &u);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Mean KL of the targets against the model's predictions.
pub fn mean_kl(
    model: &ModelApproximator,
    examples: &[ApproxExample],
    features: &Tensor,
) -> Result<f64, ApproxError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let p = model.predict_rows(&ex.ordered_h, features)?;
        for r in 0..p.rows() {
            total += kl_unchecked(ex.targets.row_slice(r), p.row_slice(r));
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

pub(crate) fn neg_entropy_sum(t: &Tensor) -> f64 {
    t.data()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.max(PROB_FLOOR).ln())
        .sum()
}

/// Minimizes the mean KL from zoo targets to predictions over all
/// (architecture, training row) pairs and keeps the epoch with the lowest
/// held-out KL.
pub fn train_approximator(
    train: &[ApproxExample],
    val: &[ApproxExample],
    features: &Tensor,
    config: &ApproxConfig,
    seed: u64,
) -> Result<(ModelApproximator, ApproxTrainReport), ApproxError> {
    let first = train
        .first()
        .ok_or_else(|| ApproxError::Config("no training architectures".into()))?;
    let dims = ApproxDims {
        embedding_width: first.ordered_h.cols(),
        d_x: features.cols(),
        classes: first.targets.cols(),
    };
    for ex in train.iter().chain(val) {
        if ex.targets.rows() != features.rows() || ex.targets.cols() != dims.classes {
            return Err(ApproxError::Config(format!(
                "targets of {} have shape {:?}, expected {}x{}",
                ex.arch_id,
                ex.targets.shape(),
                features.rows(),
                dims.classes
            )));
        }
    }
    let start = Instant::now();
    let mut model = ModelApproximator::new(config.clone(), dims, derive_seed(seed, "approx-init"))?;
    let rows = features.rows();
    let pairs: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|a| (0..rows).map(move |r| (a, r)))
        .collect();
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1) as u64;
    let opt_cfg = OptimizerConfig::adamw(config.lr, config.weight_decay)
        .with_schedule(Schedule::CosineAnnealing {
            t_max: total_steps,
            lr_min: 0.0,
        })
        .with_clip_norm(config.clip_norm);
    let mut opt = OptimizerState::new(opt_cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "approx-train"));
    let mut report = ApproxTrainReport {
        uniform_train_kl: kl_uniform(train),
        uniform_val_kl: kl_uniform(val),
        ..Default::default()
    };
    let mut best: Option<(f64, crate::numerics::ParamSet)> = None;
    let mut order = pairs;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut archs: Vec<usize> = Vec::new();
            let mut which = Vec::with_capacity(chunk.len());
            for &(a, _) in chunk {
                let pos = match archs.iter().position(|&x| x == a) {
                    Some(p) => p,
                    None => {
                        archs.push(a);
                        archs.len() - 1
                    }
                };
                which.push(pos);
            }
            let idx: Vec<usize> = chunk.iter().map(|&(_, r)| r).collect();
            let mut target = Tensor::zeros(chunk.len(), dims.classes);
            for (k, &(a, r)) in chunk.iter().enumerate() {
                for c in 0..dims.classes {
                    target.set(k, c, train[a].targets.get(r, c));
                }
            }
            let mut tape = Tape::with_tag(GradTag::Auxiliary);
            let bound = model.params.bind(&mut tape);
            let reprs: Vec<_> = archs
                .iter()
                .map(|&a| model.arch_var(&mut tape, &bound, &train[a].ordered_h))
                .collect();
            let arch_rows = tape.concat_rows(&reprs);
            let x = tape.constant(features.gather_rows(&idx));
            let logits = model.head_logits(&mut tape, &bound, arch_rows, &which, x, Some(&mut rng));
            let lp = tape.log_softmax_rows(logits);
            let n = chunk.len() as f64;
            let constant = neg_entropy_sum(&target) / n;
            let cross = tape.mul_const(lp, target);
            let cross = tape.sum(cross);
            let loss = tape.scale(cross, -1.0 / n);
            let loss = tape.add_scalar(loss, constant);
            let step = report.steps;
            let diverged = |e: crate::numerics::NumericsError| ApproxError::Diverged {
                step,
                reason: e.to_string(),
            };
            let grads = tape.backward(loss).map_err(diverged)?;
            model.params.store_grads(&bound, &grads);
            opt.step(&mut model.params).map_err(diverged)?;
            report.steps += 1;
        }
        let tkl = mean_kl(&model, train, features)?;
        let vkl = if val.is_empty() {
            tkl
        } else {
            mean_kl(&model, val, features)?
        };
        log::debug!("approximator epoch {epoch}: train kl {tkl:.5} val kl {vkl:.5}");
        report.train_kl.push(tkl);
        report.val_kl.push(vkl);
        if best.as_ref().is_none_or(|(b, _)| vkl < *b) {
            best = Some((vkl, model.params.clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}
