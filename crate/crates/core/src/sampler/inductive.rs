use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    objective_var, pi_digest, sample_subset, InstanceView, SamplerError, SubsetSelection, Surrogate,
};
use crate::digest::{derive_seed, digest_json};
use crate::layers::{adopt_params, Dense};
use crate::numerics::functional::sigmoid;
use crate::numerics::{
    checkpoint, Bound, GradTag, OptimizerConfig, OptimizerState, ParamSet, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InductiveConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub leaky_slope: f64,
    /// Entropy weight. Small values let whole classes of rows saturate at
    /// very negative logits early in training, where they stop receiving
    /// gradient; see the README for measurements.
    pub lambda: f64,
    /// Weight of the penalty tying the score total to the budget.
    pub lambda_budget: f64,
    pub lr: f64,
    pub epochs: usize,
    pub surrogate: Surrogate,
}

impl Default for InductiveConfig {
    fn default() -> Self {
        Self {
            hidden1: 64,
            hidden2: 16,
            leaky_slope: 0.01,
            lambda: 10.0,
            lambda_budget: 0.1,
            lr: 1e-3,
            epochs: 30,
            surrogate: Surrogate::MeanField,
        }
    }
}

/// Inputs of one training architecture.
#[derive(Clone, Debug)]
pub struct InductiveExample {
    pub arch_id: String,
    /// Mean of the architecture's embedding rows.
    pub pooled_h: Vec<f64>,
    pub view: InstanceView,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InductiveReport {
    /// Mean training objective per epoch.
    pub loss: Vec<f64>,
    /// Sum of scores per training architecture after training.
    pub score_sums: Vec<f64>,
    pub steps: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerDims {
    pub embedding_width: usize,
    pub d_x: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct InductiveScorer {
    pub config: InductiveConfig,
    pub dims: ScorerDims,
    pub params: ParamSet,
    l1: Dense,
    l2: Dense,
    l3: Dense,
}

impl InductiveScorer {
    pub fn new(config: InductiveConfig, dims: ScorerDims, seed: u64) -> Result<Self, SamplerError> {
        if config.hidden1 == 0 || config.hidden2 == 0 || dims.classes == 0 {
            return Err(SamplerError::Config(format!(
                "zero-sized scorer: {config:?} {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let input = dims.embedding_width + 2 * dims.classes + dims.d_x;
        let l1 = Dense::new(&mut params, "score/l1", input, config.hidden1, &mut rng)?;
        let l2 = Dense::new(&mut params, "score/l2", config.hidden1, config.hidden2, &mut rng)?;
        let l3 = Dense::new(&mut params, "score/l3", config.hidden2, 1, &mut rng)?;
        Ok(Self {
            config,
            dims,
            params,
            l1,
            l2,
            l3,
        })
    }

    /// Row `i` is `[pooled_h, probs_i, x_i, onehot(y_i)]`.
    pub fn inputs(
        &self,
        pooled_h: &[f64],
        view: &InstanceView,
        features: &Tensor,
        labels: &[usize],
    ) -> Result<Tensor, SamplerError> {
        let d = &self.dims;
        if pooled_h.len() != d.embedding_width
            || features.cols() != d.d_x
            || view.probs.cols() != d.classes
            || features.rows() != view.len()
            || labels.len() != view.len()
        {
            return Err(SamplerError::Config("scorer input shapes do not match".into()));
        }
        let width = d.embedding_width + 2 * d.classes + d.d_x;
        let mut data = Vec::with_capacity(view.len() * width);
        for (i, &y) in labels.iter().enumerate() {
            data.extend_from_slice(pooled_h);
            data.extend_from_slice(view.probs.row_slice(i));
            data.extend_from_slice(features.row_slice(i));
            data.extend((0..d.classes).map(|c| if c == y { 1.0 } else { 0.0 }));
        }
        Ok(Tensor::matrix(view.len(), width, data)?)
    }

    /// Pre-sigmoid outputs as a `1 x n` row; these are the selection logits.
    pub(crate) fn logit_row(&self, tape: &mut Tape, bound: &Bound, inputs: Tensor) -> Var {
        let x = tape.constant(inputs);
        let h = self.l1.apply(tape, bound, x);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        let h = self.l2.apply(tape, bound, h);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        let z = self.l3.apply(tape, bound, h);
        tape.transpose(z)
    }

    /// Selection logits for every instance, without recording gradients.
    pub fn logits(
        &self,
        pooled_h: &[f64],
        view: &InstanceView,
        features: &Tensor,
        labels: &[usize],
    ) -> Result<Vec<f64>, SamplerError> {
        let inputs = self.inputs(pooled_h, view, features, labels)?;
        let mut t = Tape::new();
        let bound = self.params.bind_frozen(&mut t);
        let z = self.logit_row(&mut t, &bound, inputs);
        Ok(t.value(z).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<(), SamplerError> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::json!({ "config": self.config, "dims": self.dims });
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
        checkpoint::save(&self.params, dir, "inductive")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SamplerError> {
        #[derive(Deserialize)]
        struct Meta {
            config: InductiveConfig,
            dims: ScorerDims,
        }
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let mut s = Self::new(meta.config, meta.dims, 0)?;
        adopt_params(&mut s.params, checkpoint::load(dir, "inductive")?, "inductive")?;
        Ok(s)
    }
}

/// Scores in (0, 1) for every instance.
pub fn inductive_scores(
    scorer: &InductiveScorer,
    pooled_h: &[f64],
    view: &InstanceView,
    features: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>, SamplerError> {
    let z = scorer.logits(pooled_h, view, features, labels)?;
    Ok(sigmoid(&Tensor::row(&z)).into_data())
}

/// Trains the scorer so that, across training architectures, its logits
/// minimize the surrogate objective while the scores sum to about `b`.
pub fn train_inductive(
    examples: &[InductiveExample],
    features: &Tensor,
    labels: &[usize],
    b: usize,
    config: &InductiveConfig,
    seed: u64,
) -> Result<(InductiveScorer, InductiveReport), SamplerError> {
    let first = examples
        .first()
        .ok_or_else(|| SamplerError::Config("no training architectures".into()))?;
    let dims = ScorerDims {
        embedding_width: first.pooled_h.len(),
        d_x: features.cols(),
        classes: first.view.probs.cols(),
    };
    super::check_budget(b, labels.len())?;
    let start = Instant::now();
    let mut scorer = InductiveScorer::new(*config, dims, derive_seed(seed, "inductive-init"))?;
    let inputs: Vec<Tensor> = examples
        .iter()
        .map(|ex| scorer.inputs(&ex.pooled_h, &ex.view, features, labels))
        .collect::<Result<_, _>>()?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(config.lr), &scorer.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inductive-train"));
    let mut report = InductiveReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let mut t = Tape::with_tag(GradTag::Auxiliary);
            let bound = scorer.params.bind(&mut t);
            let z = scorer.logit_row(&mut t, &bound, inputs[k].clone());
            let surrogate = objective_var(
                config.surrogate,
                &mut t,
                z,
                &examples[k].view.losses,
                b,
                config.lambda,
            );
            let s = t.sigmoid(z);
            let s = t.sum(s);
            let gap = t.add_scalar(s, -(b as f64));
            let neg = t.scale(gap, -1.0);
            let up = t.relu(gap);
            let down = t.relu(neg);
            let abs = t.add(up, down);
            let penalty = t.scale(abs, config.lambda_budget);
            let loss = t.add(surrogate, penalty);
            let grads = t.backward(loss)?;
            scorer.params.store_grads(&bound, &grads);
            opt.step(&mut scorer.params)?;
            total += t.scalar(loss);
            report.steps += 1;
        }
        report.loss.push(total / examples.len() as f64);
    }
    for ex in examples {
        let s = inductive_scores(&scorer, &ex.pooled_h, &ex.view, features, labels)?;
        report.score_sums.push(s.iter().sum());
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((scorer, report))
}

/// Draws `b` rows from the scorer's logits; no optimization is run.
pub fn inductive_select(
    scorer: &InductiveScorer,
    arch_id: &str,
    pooled_h: &[f64],
    view: &InstanceView,
    features: &Tensor,
    labels: &[usize],
    b: usize,
    seed: u64,
) -> Result<(SubsetSelection, Vec<f64>), SamplerError> {
    let pi = scorer.logits(pooled_h, view, features, labels)?;
    let indices = sample_subset(&pi, b, seed)?;
    Ok((
        SubsetSelection {
            arch_id: arch_id.to_string(),
            method: "inductive".into(),
            b,
            seed,
            indices,
            pi_digest: pi_digest(&pi),
            config_digest: digest_json(&scorer.config),
        },
        pi,
    ))
}
