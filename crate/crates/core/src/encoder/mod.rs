//! Message-passing encoder over architecture graphs, trained as a
//! variational graph autoencoder.

mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{ArchError, Architecture, OpCode};
use crate::layers::{adopt_params, Dense, Norm};
use crate::numerics::{checkpoint, Bound, NumericsError, ParamSet, Tape, Tensor, Var};

pub use train::{edge_auc, train_encoder, EncoderTrainReport};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("encoder training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of stages concatenated into each node row.
    pub depth: usize,
    pub width: usize,
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 16,
            hidden: 128,
            latent: 16,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn embedding_width(&self) -> usize {
        self.depth * self.width
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.depth == 0 || self.width == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(EncoderError::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(EncoderError::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Node embeddings of one architecture; row `u` concatenates every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub arch_id: String,
    pub h: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    inner: Dense,
    norm: Norm,
    outer: Dense,
}

impl Mlp {
    fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            inner: Dense::new(params, &format!("{name}/inner"), fan_in, hidden, rng)?,
            norm: Norm::new(params, &format!("{name}/norm"), hidden)?,
            outer: Dense::new(params, &format!("{name}/outer"), hidden, fan_out, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.inner.apply(tape, bound, x);
        let h = self.norm.apply(tape, bound, h);
        let h = tape.relu(h);
        self.outer.apply(tape, bound, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    edge: Mlp,
    update: Mlp,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    init_a: Dense,
    init_b: Dense,
    layers: Vec<Layer>,
    mu: Dense,
    log_sigma: Dense,
    log_scale: crate::numerics::ParamId,
}

/// Several graphs packed as one disjoint union.
pub(crate) struct GraphBatch {
    pub features: Tensor,
    /// Ordered neighbour pairs `(u, v)` with `v` adjacent to `u` in either direction.
    pub pair_src: Vec<usize>,
    pub pair_dst: Vec<usize>,
    /// Pair indices grouped by their source node.
    pub groups: Vec<Vec<usize>>,
    pub adjacency: Tensor,
    /// 1 for ordered pairs `u != v` inside the same graph.
    pub pair_mask: Tensor,
}

impl GraphBatch {
    pub fn new(archs: &[&Architecture]) -> Self {
        let total: usize = archs.iter().map(|a| a.num_nodes()).sum();
        let mut features = Tensor::zeros(total, OpCode::ALL.len());
        let mut adjacency = Tensor::zeros(total, total);
        let mut pair_mask = Tensor::zeros(total, total);
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); total];
        let mut base = 0;
        for a in archs {
            let n = a.num_nodes();
            for (u, op) in a.nodes.iter().enumerate() {
                features.set(base + u, op.ordinal(), 1.0);
                for v in 0..n {
                    if u != v {
                        pair_mask.set(base + u, base + v, 1.0);
                    }
                }
            }
            for &(s, d) in &a.edges {
                let (s, d) = (base + s, base + d);
                if adjacency.get(s, d) == 0.0 {
                    nbrs[s].push(d);
                    nbrs[d].push(s);
                }
                adjacency.set(s, d, 1.0);
                adjacency.set(d, s, 1.0);
            }
            base += n;
        }
        let mut pair_src = Vec::new();
        let mut pair_dst = Vec::new();
        let mut groups = vec![Vec::new(); total];
        for (u, vs) in nbrs.iter_mut().enumerate() {
            vs.sort_unstable();
            for &v in vs.iter() {
                groups[u].push(pair_src.len());
                pair_src.push(u);
                pair_dst.push(v);
            }
        }
        Self {
            features,
            pair_src,
            pair_dst,
            groups,
            adjacency,
            pair_mask,
        }
    }
}

/// Reconstruction and KL parts of the evidence lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub reconstruction: f64,
    pub kl: f64,
}

impl ElboParts {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.kl
    }
}

impl GraphEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.width;
        let feat = OpCode::ALL.len();
        let init_a = Dense::new(&mut params, "init/a", feat, d, &mut rng)?;
        let init_b = Dense::new(&mut params, "init/b", d, d, &mut rng)?;
        let mut layers = Vec::new();
        for k in 0..config.depth - 1 {
            layers.push(Layer {
                edge: Mlp::new(
                    &mut params,
                    &format!("layer{k}/edge"),
                    2 * d,
                    config.hidden,
                    d,
                    &mut rng,
                )?,
                update: Mlp::new(
                    &mut params,
                    &format!("layer{k}/update"),
                    2 * d,
                    config.hidden,
                    d,
                    &mut rng,
                )?,
            });
        }
        let width = config.embedding_width();
        let mu = Dense::new(&mut params, "vgae/mu", width, config.latent, &mut rng)?;
        let log_sigma = Dense::new(&mut params, "vgae/log_sigma", width, config.latent, &mut rng)?;
        let log_scale = params.add_filled("vgae/log_scale", 1, 0.0)?;
        Ok(Self {
            config,
            params,
            init_a,
            init_b,
            layers,
            mu,
            log_sigma,
            log_scale,
        })
    }

    /// Node embeddings for a packed batch, `N x depth*width`.
    pub(crate) fn embed(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch) -> Var {
        let f = tape.constant(batch.features.clone());
        let h = self.init_a.apply(tape, bound, f);
        let h = tape.relu(h);
        let mut h = self.init_b.apply(tape, bound, h);
        let mut stages = vec![h];
        for layer in &self.layers {
            let hu = tape.gather_rows(h, &batch.pair_src);
            let hv = tape.gather_rows(h, &batch.pair_dst);
            let pair_in = tape.concat_cols(&[hu, hv]);
            let msgs = layer.edge.apply(tape, bound, pair_in);
            let agg = tape.segment_sum(msgs, &batch.groups);
            let upd_in = tape.concat_cols(&[h, agg]);
            h = layer.update.apply(tape, bound, upd_in);
            stages.push(h);
        }
        if stages.len() == 1 {
            stages[0]
        } else {
            tape.concat_cols(&stages)
        }
    }

    /// Summed reconstruction and KL terms for a batch, with one
    /// reparameterized latent sample drawn from `noise`.
    pub(crate) fn elbo_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &GraphBatch,
        noise: Tensor,
    ) -> (Var, Var) {
        let h = self.embed(tape, bound, batch);
        let mu = self.mu.apply(tape, bound, h);
        let ls = self.log_sigma.apply(tape, bound, h);
        let sigma = tape.exp(ls);
        let eps = tape.constant(noise);
        let spread = tape.mul(sigma, eps);
        let z = tape.add(mu, spread);
        let zt = tape.transpose(z);
        let gram = tape.matmul(z, zt);
        let ls_scale = bound.get(self.log_scale);
        let scale = tape.exp(ls_scale);
        let logits = tape.mul_scalar(gram, scale);
        let hits = tape.mul_const(logits, batch.adjacency.clone());
        let sp = tape.softplus(logits);
        let sp = tape.mul_const(sp, batch.pair_mask.clone());
        let rec = tape.sub(hits, sp);
        let rec = tape.sum(rec);

        let mu2 = tape.mul(mu, mu);
        let var = tape.mul(sigma, sigma);
        let ls2 = tape.scale(ls, 2.0);
        let t = tape.add(mu2, var);
        let t = tape.sub(t, ls2);
        let t = tape.add_scalar(t, -1.0);
        let kl = tape.sum(t);
        let kl = tape.scale(kl, 0.5);
        (rec, kl)
    }

    pub(crate) fn noise(&self, rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * self.config.latent)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(rows, self.config.latent, data).unwrap()
    }

    pub fn encode(&self, arch: &Architecture) -> Result<EmbeddingMatrix, EncoderError> {
        arch.ensure_valid()?;
        let batch = GraphBatch::new(&[arch]);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = self.embed(&mut tape, &bound, &batch);
        Ok(EmbeddingMatrix {
            arch_id: arch.id.clone(),
            h: tape.value(h).clone(),
        })
    }

    /// Latent means per node, used for edge scoring.
    pub fn latent_means(&self, arch: &Architecture) -> Result<Tensor, EncoderError> {
        arch.ensure_valid()?;
        let batch = GraphBatch::new(&[arch]);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = self.embed(&mut tape, &bound, &batch);
        let mu = self.mu.apply(&mut tape, &bound, h);
        Ok(tape.value(mu).clone())
    }

    pub fn elbo(&self, arch: &Architecture, sample_seed: u64) -> Result<ElboParts, EncoderError> {
        arch.ensure_valid()?;
        let batch = GraphBatch::new(&[arch]);
        let noise = self.noise(arch.num_nodes(), sample_seed);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let (rec, kl) = self.elbo_vars(&mut tape, &bound, &batch, noise);
        tape.check()?;
        Ok(ElboParts {
            reconstruction: tape.scalar(rec),
            kl: tape.scalar(kl),
        })
    }

    /// ELBO of one architecture as a differentiable scalar, with the latent
    /// noise fixed by `sample_seed`.
    pub fn elbo_objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        arch: &Architecture,
        sample_seed: u64,
    ) -> Var {
        let batch = GraphBatch::new(&[arch]);
        let noise = self.noise(arch.num_nodes(), sample_seed);
        let (rec, kl) = self.elbo_vars(tape, bound, &batch, noise);
        tape.sub(rec, kl)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.config)?)?;
        checkpoint::save(&self.params, dir, "encoder")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let config: EncoderConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let mut enc = Self::new(config, 0)?;
        adopt_params(&mut enc.params, checkpoint::load(dir, "encoder")?, "encoder")?;
        Ok(enc)
    }

    #[cfg(test)]
    fn zero_heads(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.starts_with("vgae/mu") || p.name.starts_with("vgae/log_sigma") {
                p.value = Tensor::zeros_like(&p.value);
            }
        }
    }
}

#[cfg(test)]
mod tests;
