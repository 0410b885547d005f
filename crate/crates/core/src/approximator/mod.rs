//! Predicts a trained model's per-instance softmax output from the
//! architecture's node embeddings and the instance features.

mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{ArchError, Architecture};
use crate::encoder::EmbeddingMatrix;
use crate::layers::{adopt_params, Dense, Norm};
use crate::numerics::functional::PROB_FLOOR;
use crate::numerics::{checkpoint, Bound, NumericsError, ParamSet, Tape, Tensor, Var};

pub use train::{kl_uniform, train_approximator, ApproxExample, ApproxTrainReport};

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("invalid approximator config: {0}")]
    Config(String),
    #[error("feature width {got} does not match configured d_x {expected}")]
    Width { got: usize, expected: usize },
    #[error("missing zoo record for architecture {0}")]
    MissingRecord(String),
    #[error("approximator training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the ordered node embeddings are reduced to one architecture vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxVariant {
    Attention,
    Feedforward,
    Recurrent,
}

impl ApproxVariant {
    pub const ALL: [ApproxVariant; 3] = [Self::Feedforward, Self::Recurrent, Self::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Feedforward => "feedforward",
            Self::Recurrent => "recurrent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxConfig {
    pub variant: ApproxVariant,
    pub model_width: usize,
    pub key_width: usize,
    pub ffn_width: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            variant: ApproxVariant::Attention,
            model_width: 16,
            key_width: 8,
            ffn_width: 64,
            head_hidden: 256,
            dropout: 0.3,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.005,
            clip_norm: 5.0,
            batch_size: 64,
        }
    }
}

impl ApproxConfig {
    pub fn validate(&self) -> Result<(), ApproxError> {
        if self.model_width == 0
            || self.key_width == 0
            || self.ffn_width == 0
            || self.head_hidden == 0
            || self.batch_size == 0
        {
            return Err(ApproxError::Config(format!("zero-sized dimension in {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ApproxError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if !(self.lr > 0.0) {
            return Err(ApproxError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Shapes fixed by upstream stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproxDims {
    pub embedding_width: usize,
    pub d_x: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    query: Dense,
    key: Dense,
    value: Dense,
    combine: Dense,
    norm1: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
    norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Pool {
    ffn_in: Dense,
    ffn_out: Dense,
    norm: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    input: Dense,
    forget: Dense,
    output: Dense,
    cell: Dense,
}

#[derive(Clone, Copy, Debug)]
enum Reducer {
    Attention(Attention),
    Feedforward(Pool),
    Recurrent(Lstm),
}

#[derive(Clone, Debug)]
pub struct ModelApproximator {
    pub config: ApproxConfig,
    pub dims: ApproxDims,
    pub params: ParamSet,
    proj: Dense,
    reducer: Reducer,
    head_hidden: Dense,
    head_out: Dense,
}

/// Embedding rows reordered so row `k` belongs to the `k`-th BFS node.
pub fn ordered_embedding(emb: &EmbeddingMatrix, arch: &Architecture) -> Result<Tensor, ApproxError> {
    if emb.h.rows() != arch.num_nodes() {
        return Err(ApproxError::Config(format!(
            "embedding has {} rows for a {}-node architecture",
            emb.h.rows(),
            arch.num_nodes()
        )));
    }
    Ok(emb.h.gather_rows(&arch.bfs_order()?.order))
}

impl ModelApproximator {
    pub fn new(config: ApproxConfig, dims: ApproxDims, seed: u64) -> Result<Self, ApproxError> {
        config.validate()?;
        if dims.embedding_width == 0 || dims.d_x == 0 || dims.classes < 2 {
            return Err(ApproxError::Config(format!("bad dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let w = config.model_width;
        let proj = Dense::new(&mut p, "proj", dims.embedding_width, w, &mut rng)?;
        let reducer = match config.variant {
            ApproxVariant::Attention => Reducer::Attention(Attention {
                query: Dense::no_bias(&mut p, "attn/query", w, config.key_width, &mut rng)?,
                key: Dense::no_bias(&mut p, "attn/key", w, config.key_width, &mut rng)?,
                value: Dense::no_bias(&mut p, "attn/value", w, config.key_width, &mut rng)?,
                combine: Dense::no_bias(&mut p, "attn/combine", config.key_width, w, &mut rng)?,
                norm1: Norm::new(&mut p, "attn/norm1", w)?,
                ffn_in: Dense::no_bias(&mut p, "attn/ffn_in", w, config.ffn_width, &mut rng)?,
                ffn_out: Dense::no_bias(&mut p, "attn/ffn_out", config.ffn_width, w, &mut rng)?,
                norm2: Norm::new(&mut p, "attn/norm2", w)?,
            }),
            ApproxVariant::Feedforward => Reducer::Feedforward(Pool {
                ffn_in: Dense::no_bias(&mut p, "pool/ffn_in", w, config.ffn_width, &mut rng)?,
                ffn_out: Dense::no_bias(&mut p, "pool/ffn_out", config.ffn_width, w, &mut rng)?,
                norm: Norm::new(&mut p, "pool/norm", w)?,
            }),
            ApproxVariant::Recurrent => Reducer::Recurrent(Lstm {
                input: Dense::new(&mut p, "lstm/input", 2 * w, w, &mut rng)?,
                forget: Dense::new(&mut p, "lstm/forget", 2 * w, w, &mut rng)?,
                output: Dense::new(&mut p, "lstm/output", 2 * w, w, &mut rng)?,
                cell: Dense::new(&mut p, "lstm/cell", 2 * w, w, &mut rng)?,
            }),
        };
        let head_hidden = Dense::new(&mut p, "head/hidden", w + dims.d_x, config.head_hidden, &mut rng)?;
        let head_out = Dense::new(&mut p, "head/out", config.head_hidden, dims.classes, &mut rng)?;
        Ok(Self {
            config,
            dims,
            params: p,
            proj,
            reducer,
            head_hidden,
            head_out,
        })
    }

    fn attention_core(&self, a: &Attention, tape: &mut Tape, bound: &Bound, hp: Var) -> (Var, Var) {
        let q = a.query.apply(tape, bound, hp);
        let k = a.key.apply(tape, bound, hp);
        let v = a.value.apply(tape, bound, hp);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.config.key_width as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let mixed = tape.matmul(weights, v);
        let att = a.combine.apply(tape, bound, mixed);
        let z1 = tape.add(att, hp);
        let z1 = a.norm1.apply(tape, bound, z1);
        let f = a.ffn_in.apply(tape, bound, z1);
        let f = tape.relu(f);
        let z2 = a.ffn_out.apply(tape, bound, f);
        let z3 = tape.add(z1, z2);
        (a.norm2.apply(tape, bound, z3), weights)
    }

    /// Architecture vector (`1 x model_width`) from BFS-ordered embeddings.
    pub(crate) fn arch_var(&self, tape: &mut Tape, bound: &Bound, ordered_h: &Tensor) -> Var {
        let h = tape.constant(ordered_h.clone());
        let hp = self.proj.apply(tape, bound, h);
        let n = ordered_h.rows();
        match &self.reducer {
            Reducer::Attention(a) => {
                let (z, _) = self.attention_core(a, tape, bound, hp);
                tape.gather_rows(z, &[n - 1])
            }
            Reducer::Feedforward(p) => {
                let s = tape.sum_rows(hp);
                let m = tape.scale(s, 1.0 / n as f64);
                let f = p.ffn_in.apply(tape, bound, m);
                let f = tape.relu(f);
                let f = p.ffn_out.apply(tape, bound, f);
                let r = tape.add(m, f);
                p.norm.apply(tape, bound, r)
            }
            Reducer::Recurrent(l) => {
                let w = self.config.model_width;
                let mut h = tape.constant(Tensor::zeros(1, w));
                let mut c = tape.constant(Tensor::zeros(1, w));
                for t in 0..n {
                    let x = tape.gather_rows(hp, &[t]);
                    let z = tape.concat_cols(&[x, h]);
                    let i = l.input.apply(tape, bound, z);
                    let i = tape.sigmoid(i);
                    let f = l.forget.apply(tape, bound, z);
                    let f = tape.sigmoid(f);
                    let o = l.output.apply(tape, bound, z);
                    let o = tape.sigmoid(o);
                    let g = l.cell.apply(tape, bound, z);
                    let g = tape.tanh(g);
                    let fc = tape.mul(f, c);
                    let ig = tape.mul(i, g);
                    c = tape.add(fc, ig);
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc);
                }
                h
            }
        }
    }

    /// Head logits for rows of `x` paired with the architecture rows of
    /// `arch_rows` selected by `which`.
    pub(crate) fn head_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        arch_rows: Var,
        which: &[usize],
        x: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let a = tape.gather_rows(arch_rows, which);
        let inp = tape.concat_cols(&[a, x]);
        let h = self.head_hidden.apply(tape, bound, inp);
        let mut h = tape.relu(h);
        if let Some(rng) = dropout {
            h = tape.dropout(h, self.config.dropout, rng);
        }
        self.head_out.apply(tape, bound, h)
    }

    /// Mean KL from `targets` to the predictions for the rows of `x`, as a
    /// differentiable scalar without dropout. This is the training loss.
    pub fn kl_objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ordered_h: &Tensor,
        x: &Tensor,
        targets: &Tensor,
    ) -> Var {
        let n = x.rows() as f64;
        let a = self.arch_var(tape, bound, ordered_h);
        let xv = tape.constant(x.clone());
        let logits = self.head_logits(tape, bound, a, &vec![0; x.rows()], xv, None);
        let lp = tape.log_softmax_rows(logits);
        let cross = tape.mul_const(lp, targets.clone());
        let cross = tape.sum(cross);
        let loss = tape.scale(cross, -1.0 / n);
        tape.add_scalar(loss, train::neg_entropy_sum(targets) / n)
    }

    /// Architecture vector without recording gradients.
    pub fn arch_repr(&self, ordered_h: &Tensor) -> Result<Tensor, ApproxError> {
        self.check_embedding(ordered_h)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = self.arch_var(&mut tape, &bound, ordered_h);
        Ok(tape.value(v).clone())
    }

    /// Attention weights over the ordered nodes; rows sum to one.
    pub fn attention_weights(&self, ordered_h: &Tensor) -> Result<Tensor, ApproxError> {
        self.check_embedding(ordered_h)?;
        let Reducer::Attention(a) = &self.reducer else {
            return Err(ApproxError::Config("not an attention approximator".into()));
        };
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = tape.constant(ordered_h.clone());
        let hp = self.proj.apply(&mut tape, &bound, h);
        let (_, w) = self.attention_core(a, &mut tape, &bound, hp);
        Ok(tape.value(w).clone())
    }

    fn check_embedding(&self, ordered_h: &Tensor) -> Result<(), ApproxError> {
        if ordered_h.rows() == 0 || ordered_h.cols() != self.dims.embedding_width {
            return Err(ApproxError::Config(format!(
                "embedding shape {:?}, expected width {}",
                ordered_h.shape(),
                self.dims.embedding_width
            )));
        }
        Ok(())
    }

    /// Predicted class distributions for every row of `features`.
    pub fn predict_rows(&self, ordered_h: &Tensor, features: &Tensor) -> Result<Tensor, ApproxError> {
        self.check_embedding(ordered_h)?;
        if features.cols() != self.dims.d_x {
            return Err(ApproxError::Width {
                got: features.cols(),
                expected: self.dims.d_x,
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let a = self.arch_var(&mut tape, &bound, ordered_h);
        let x = tape.constant(features.clone());
        let which = vec![0; features.rows()];
        let logits = self.head_logits(&mut tape, &bound, a, &which, x, None);
        let p = tape.softmax_rows(logits);
        Ok(tape.value(p).map(|v| v.max(PROB_FLOOR)))
    }

    pub fn predict(&self, ordered_h: &Tensor, x: &[f64]) -> Result<Vec<f64>, ApproxError> {
        let t = self.predict_rows(ordered_h, &Tensor::row(x))?;
        Ok(t.into_data())
    }

    /// Cross-entropy of each predicted row against its label.
    pub fn instance_losses(
        &self,
        ordered_h: &Tensor,
        features: &Tensor,
        labels: &[usize],
    ) -> Result<Vec<f64>, ApproxError> {
        let p = self.predict_rows(ordered_h, features)?;
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                if y >= self.dims.classes {
                    return Err(ApproxError::Numerics(NumericsError::LabelOutOfRange {
                        label: y,
                        classes: self.dims.classes,
                    }));
                }
                Ok(-p.get(r, y).ln())
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), ApproxError> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::json!({ "config": self.config, "dims": self.dims });
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
        checkpoint::save(&self.params, dir, "approximator")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ApproxError> {
        #[derive(Deserialize)]
        struct Meta {
            config: ApproxConfig,
            dims: ApproxDims,
        }
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let mut m = Self::new(meta.config, meta.dims, 0)?;
        adopt_params(
            &mut m.params,
            checkpoint::load(dir, "approximator")?,
            "approximator",
        )?;
        Ok(m)
    }
}
