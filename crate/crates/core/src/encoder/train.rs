use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError, GraphBatch, GraphEncoder};
use crate::archspace::Architecture;
use crate::digest::derive_seed;
use crate::numerics::{GradTag, OptimizerConfig, OptimizerState, Tape};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    /// Mean ELBO per graph before training and after each epoch, under a
    /// fixed latent sample.
    pub curve: Vec<f64>,
    pub steps: u64,
    pub seconds: f64,
}

fn mean_elbo(enc: &GraphEncoder, space: &[Architecture], seed: u64) -> f64 {
    let mut total = 0.0;
    for (i, chunk) in space.chunks(enc.config.batch_size).enumerate() {
        let refs: Vec<&Architecture> = chunk.iter().collect();
        let batch = GraphBatch::new(&refs);
        let noise = enc.noise(batch.features.rows(), derive_seed(seed, &format!("eval{i}")));
        let mut tape = Tape::new();
        let bound = enc.params.bind_frozen(&mut tape);
        let (rec, kl) = enc.elbo_vars(&mut tape, &bound, &batch, noise);
        total += tape.scalar(rec) - tape.scalar(kl);
    }
    total / space.len() as f64
}

/// Fits the encoder by maximizing the mean ELBO over `space`.
pub fn train_encoder(
    space: &[Architecture],
    config: &EncoderConfig,
    seed: u64,
) -> Result<(GraphEncoder, EncoderTrainReport), EncoderError> {
    config.validate()?;
    if space.len() < config.batch_size {
        return Err(EncoderError::Config(format!(
            "space of {} graphs is smaller than batch size {}",
            space.len(),
            config.batch_size
        )));
    }
    for a in space {
        a.ensure_valid()?;
    }
    let start = Instant::now();
    let mut enc = GraphEncoder::new(config.clone(), derive_seed(seed, "encoder-init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-train"));
    let mut opt = OptimizerState::new(OptimizerConfig::adam(config.lr), &enc.params);
    let eval_seed = derive_seed(seed, "encoder-eval");
    let mut report = EncoderTrainReport {
        curve: vec![mean_elbo(&enc, space, eval_seed)],
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..space.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Architecture> = chunk.iter().map(|&i| &space[i]).collect();
            let batch = GraphBatch::new(&refs);
            let noise = enc.noise(batch.features.rows(), rng.gen());
            let mut tape = Tape::with_tag(GradTag::Auxiliary);
            let bound = enc.params.bind(&mut tape);
            let (rec, kl) = enc.elbo_vars(&mut tape, &bound, &batch, noise);
            let neg = tape.sub(kl, rec);
            let loss = tape.scale(neg, 1.0 / chunk.len() as f64);
            let diverged = |e: crate::numerics::NumericsError| EncoderError::Diverged {
                epoch,
                reason: e.to_string(),
            };
            let grads = tape.backward(loss).map_err(diverged)?;
            enc.params.store_grads(&bound, &grads);
            opt.step(&mut enc.params).map_err(diverged)?;
            report.steps += 1;
        }
        let m = mean_elbo(&enc, space, eval_seed);
        if !m.is_finite() {
            return Err(EncoderError::Diverged {
                epoch,
                reason: "non-finite ELBO".into(),
            });
        }
        log::debug!("encoder epoch {epoch}: mean elbo {m:.4}");
        report.curve.push(m);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((enc, report))
}

/// Area under the ROC curve for recovering undirected edges from latent
/// means, pooled over the unordered node pairs of every graph.
pub fn edge_auc(enc: &GraphEncoder, graphs: &[Architecture]) -> Result<f64, EncoderError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for a in graphs {
        let mu = enc.latent_means(a)?;
        let n = a.num_nodes();
        let mut adj = vec![false; n * n];
        for &(s, d) in &a.edges {
            adj[s * n + d] = true;
            adj[d * n + s] = true;
        }
        for u in 0..n {
            for v in u + 1..n {
                let s: f64 = mu
                    .row_slice(u)
                    .iter()
                    .zip(mu.row_slice(v))
                    .map(|(x, y)| x * y)
                    .sum();
                if adj[u * n + v] {
                    pos.push(s);
                } else {
                    neg.push(s);
                }
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(EncoderError::Config("AUC needs both edges and non-edges".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}
