use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{fraction_count, ExperimentConfig, Method};
use super::report::{
    aggregate_reports, evaluate_run, write_aggregate, write_report, MachineFingerprint, MultiSeedReport,
    RunReport,
};
use super::HarnessError;
use crate::approximator::{
    ordered_embedding, train_approximator, ApproxConfig, ApproxExample, ApproxVariant, ModelApproximator,
};
use crate::archspace::{generate_space, load_space, save_space, Architecture};
use crate::baselines::{
    select_bottom_b_loss, select_by_difficulty, select_facility_location, select_random, selection_record,
    BaselineMethod,
};
use crate::digest::{derive_seed, digest_json};
use crate::encoder::{train_encoder, GraphEncoder};
use crate::numerics::functional::entropy;
use crate::numerics::{grad_evaluations, GradTag, Tensor};
use crate::sampler::{
    argtop_b, hybrid_select, inductive_select, train_inductive, transductive_select, InductiveExample,
    InductiveScorer, InstanceView, SubsetSelection,
};
use crate::zoo::store::{load_predictions, read_entry, save_record, write_index};
use crate::zoo::{
    accuracy, ingest_csv, make_blobs, pretrain, train_net, DatasetBundle, MaterializedNet, NetDims, ZooError,
};

/// Sampler columns of the ablation matrix.
pub const ABLATION_SAMPLERS: [&str; 3] = ["uncertainty", "loss", "inductive"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Space,
    Data,
    Zoo,
    Encoder,
    Approximator,
    Inductive,
    Select,
    Downstream,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Space,
        Stage::Data,
        Stage::Zoo,
        Stage::Encoder,
        Stage::Approximator,
        Stage::Inductive,
        Stage::Select,
        Stage::Downstream,
        Stage::Evaluate,
    ];

    /// The CLI subcommand that runs this stage.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Space => "gen-space",
            Stage::Data => "make-data",
            Stage::Zoo => "pretrain-zoo",
            Stage::Encoder => "train-encoder",
            Stage::Approximator => "train-approximator",
            Stage::Inductive => "train-inductive",
            Stage::Select => "select",
            Stage::Downstream => "train-on-subset",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Space => "space",
            Stage::Data => "data",
            Stage::Zoo => "zoo",
            Stage::Encoder => "encoder",
            Stage::Approximator => "approximator",
            Stage::Inductive => "inductive",
            Stage::Select => "selections",
            Stage::Downstream => "downstream",
            Stage::Evaluate => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Space | Stage::Data => &[],
            Stage::Zoo => &[Stage::Space, Stage::Data],
            Stage::Encoder => &[Stage::Space],
            Stage::Approximator => &[Stage::Encoder, Stage::Zoo],
            Stage::Inductive => &[Stage::Approximator],
            Stage::Select => &[Stage::Inductive],
            Stage::Downstream => &[Stage::Select],
            Stage::Evaluate => &[Stage::Downstream],
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub digest: String,
    pub seconds: f64,
    pub fingerprint: MachineFingerprint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
}

/// Architecture ids of the 70/10/20 split and the subsets used downstream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub zoo_train: Vec<String>,
    pub zoo_val: Vec<String>,
    pub test_archs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { reason: String },
}

impl CellStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }

    pub fn reason(&self) -> &str {
        match self {
            CellStatus::Ok => "",
            CellStatus::Failed { reason } => reason,
        }
    }
}

/// One (method, architecture, budget) selection and what it cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCell {
    pub method: String,
    pub arch_id: String,
    pub b: usize,
    pub b_frac: f64,
    #[serde(flatten)]
    pub status: CellStatus,
    /// Selection file relative to the run directory.
    pub file: Option<String>,
    pub seconds: f64,
    pub model_grad_evals: u64,
    pub surrogate_grad_evals: u64,
}

/// Outcome of training one test architecture from scratch on a subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamCell {
    pub method: String,
    pub b: usize,
    pub b_frac: f64,
    #[serde(flatten)]
    pub status: CellStatus,
    pub test_acc: Option<f64>,
    pub seconds: f64,
    pub grad_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamArch {
    pub arch_id: String,
    pub full: DownstreamCell,
    pub cells: Vec<DownstreamCell>,
}

pub struct PipelineOutcome {
    pub report: RunReport,
    pub stages: Vec<StageOutcome>,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn column_mean(h: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (o, v) in out.iter_mut().zip(h.row_slice(r)) {
            *o += v;
        }
    }
    out.iter().map(|v| v / h.rows().max(1) as f64).collect()
}

/// Runs `f` and reports its wall-clock time and the backward passes it
/// spent on model training and on surrogate optimization.
fn counted<T>(f: impl FnOnce() -> T) -> (T, f64, u64, u64) {
    let m0 = grad_evaluations(GradTag::ModelTraining);
    let s0 = grad_evaluations(GradTag::Surrogate);
    let start = Instant::now();
    let out = f();
    (
        out,
        start.elapsed().as_secs_f64(),
        grad_evaluations(GradTag::ModelTraining) - m0,
        grad_evaluations(GradTag::Surrogate) - s0,
    )
}

pub(crate) fn selection_file(method: &str, b: usize, arch: &str) -> String {
    format!("selections/{method}/b-{b}/{arch}.json")
}

/// Per-architecture inputs shared by the approximator-driven selectors.
struct ArchView {
    pooled_h: Vec<f64>,
    view: InstanceView,
    seconds: f64,
}

struct SelectContext<'a> {
    space: &'a BTreeMap<String, Architecture>,
    data: &'a DatasetBundle,
    features: &'a Tensor,
    labels: &'a [usize],
    encoder: &'a GraphEncoder,
    approximators: &'a BTreeMap<ApproxVariant, ModelApproximator>,
    scorers: &'a BTreeMap<(ApproxVariant, usize), InductiveScorer>,
    facility: &'a BTreeMap<usize, (Vec<usize>, f64)>,
}

/// One seed of an experiment rooted at a run directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub seed: u64,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(
        config: ExperimentConfig,
        root: impl Into<PathBuf>,
        seed: u64,
        workers: usize,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        if workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            config,
            root: root.into(),
            seed,
            pool,
        })
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    fn space_seed(&self) -> u64 {
        self.config.space.seed.unwrap_or(self.seed)
    }

    fn data_seed(&self) -> u64 {
        self.config.dataset.seed.unwrap_or(self.seed)
    }

    fn variants(&self) -> Vec<ApproxVariant> {
        if self.config.ablation {
            ApproxVariant::ALL.to_vec()
        } else {
            vec![self.config.approximator.variant]
        }
    }

    fn approx_dir(&self, v: ApproxVariant) -> PathBuf {
        let base = self.dir(Stage::Approximator);
        if v == self.config.approximator.variant {
            base
        } else {
            base.join("variants").join(v.name())
        }
    }

    fn inductive_dir(&self, v: ApproxVariant, b: usize) -> PathBuf {
        let base = self.dir(Stage::Inductive);
        let base = if v == self.config.approximator.variant {
            base
        } else {
            base.join(v.name())
        };
        base.join(format!("b-{b}"))
    }

    /// Digest of a stage's own settings chained with its upstream digests.
    pub fn stage_digest(&self, stage: Stage) -> String {
        let c = &self.config;
        let own = match stage {
            Stage::Space => json!({
                "space": c.space, "split": c.split, "seed": self.space_seed(),
                "archs": [c.zoo.train_archs, c.zoo.val_archs, c.zoo.test_archs],
            }),
            Stage::Data => json!({ "dataset": c.dataset, "seed": self.data_seed() }),
            Stage::Zoo => json!({ "train": c.zoo.train, "d_hidden": c.zoo.d_hidden, "seed": self.seed }),
            Stage::Encoder => json!({ "encoder": c.encoder, "seed": self.seed }),
            Stage::Approximator => json!({
                "approximator": c.approximator, "ablation": c.ablation, "seed": self.seed,
            }),
            Stage::Inductive => json!({ "inductive": c.inductive, "budgets": c.budgets, "seed": self.seed }),
            Stage::Select => json!({
                "methods": c.methods, "budgets": c.budgets, "hybrid_grid": c.hybrid_grid,
                "transductive": c.transductive, "baseline": c.baseline, "seed": self.seed,
            }),
            Stage::Downstream => json!({ "train": c.downstream_config(), "seed": self.seed }),
            Stage::Evaluate => json!({ "ranking_k": c.ranking_k }),
        };
        let upstream: Vec<String> = stage.upstream().iter().map(|u| self.stage_digest(*u)).collect();
        digest_json(&json!({ "stage": stage.dir(), "own": own, "upstream": upstream }))
    }

    pub fn marker(&self, stage: Stage) -> Option<StageMarker> {
        read_json(&self.dir(stage).join("stage.json")).ok()
    }

    pub fn is_current(&self, stage: Stage) -> bool {
        self.marker(stage)
            .is_some_and(|m| m.digest == self.stage_digest(stage))
    }

    fn write_run_file(&self) -> Result<(), HarnessError> {
        write_json(
            &self.root.join("run.json"),
            &json!({ "seed": self.seed, "config": self.config }),
        )
    }

    /// Runs one stage unless its artifacts already match the config.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, HarnessError> {
        for up in stage.upstream() {
            if !self.is_current(*up) {
                return Err(HarnessError::Stage {
                    stage: stage.name(),
                    message: format!("upstream stage {} has not completed for this config", up.name()),
                });
            }
        }
        if self.is_current(stage) {
            return Ok(StageOutcome {
                stage,
                status: StageStatus::Skipped,
                seconds: 0.0,
            });
        }
        self.write_run_file()?;
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        log::info!("stage {} (seed {})", stage.name(), self.seed);
        self.execute(stage).map_err(|e| match e {
            HarnessError::Stage { .. } => e,
            other => HarnessError::Stage {
                stage: stage.name(),
                message: other.to_string(),
            },
        })?;
        let seconds = start.elapsed().as_secs_f64();
        write_json(
            &dir.join("stage.json"),
            &StageMarker {
                stage: stage.dir().into(),
                digest: self.stage_digest(stage),
                seconds,
                fingerprint: MachineFingerprint::current(),
            },
        )?;
        Ok(StageOutcome {
            stage,
            status: StageStatus::Ran,
            seconds,
        })
    }

    /// Runs every stage in order and returns the report.
    pub fn run(&self) -> Result<PipelineOutcome, HarnessError> {
        let mut stages = Vec::new();
        for s in Stage::ALL {
            stages.push(self.run_stage(s)?);
        }
        let report: RunReport = read_json(&self.dir(Stage::Evaluate).join("report.json"))?;
        Ok(PipelineOutcome { report, stages })
    }

    fn execute(&self, stage: Stage) -> Result<(), HarnessError> {
        match stage {
            Stage::Space => self.gen_space(),
            Stage::Data => self.make_data(),
            Stage::Zoo => self.pretrain_zoo(),
            Stage::Encoder => self.train_encoder(),
            Stage::Approximator => self.train_approximators(),
            Stage::Inductive => self.train_inductive(),
            Stage::Select => self.select(),
            Stage::Downstream => self.train_on_subsets(),
            Stage::Evaluate => {
                let report = evaluate_run(&self.root)?;
                write_report(&self.dir(Stage::Evaluate), &report)
            }
        }
    }

    pub fn load_space(&self) -> Result<BTreeMap<String, Architecture>, HarnessError> {
        let space = load_space(&self.dir(Stage::Space).join("space.json"))?;
        Ok(space.into_iter().map(|a| (a.id.clone(), a)).collect())
    }

    pub fn load_split(&self) -> Result<SpaceSplit, HarnessError> {
        read_json(&self.dir(Stage::Space).join("splits.json"))
    }

    pub fn load_data(&self) -> Result<DatasetBundle, HarnessError> {
        Ok(DatasetBundle::load(&self.dir(Stage::Data).join("dataset.json"))?)
    }

    fn net_dims(&self, data: &DatasetBundle) -> NetDims {
        NetDims {
            d_x: data.d_x(),
            d_hidden: self.config.zoo.d_hidden,
            classes: data.classes,
        }
    }

    fn budgets(&self, n_train: usize) -> Vec<(f64, usize)> {
        self.config
            .budgets
            .iter()
            .map(|&f| (f, fraction_count(f, n_train)))
            .collect()
    }

    fn gen_space(&self) -> Result<(), HarnessError> {
        let c = &self.config;
        let seed = self.space_seed();
        let space = generate_space(seed, c.space.count, &c.space.constraints())?;
        save_space(&self.dir(Stage::Space).join("space.json"), &space)?;
        let mut ids: Vec<String> = space.iter().map(|a| a.id.clone()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "space-split")));
        let (tr, va, _) = c.split.sizes(ids.len());
        let train = ids[..tr].to_vec();
        let val = ids[tr..tr + va].to_vec();
        let test = ids[tr + va..].to_vec();
        let split = SpaceSplit {
            zoo_train: train[..c.zoo.train_archs].to_vec(),
            zoo_val: val[..c.zoo.val_archs].to_vec(),
            test_archs: test[..c.zoo.test_archs].to_vec(),
            train,
            val,
            test,
        };
        write_json(&self.dir(Stage::Space).join("splits.json"), &split)
    }

    fn make_data(&self) -> Result<(), HarnessError> {
        let d = &self.config.dataset;
        let seed = self.data_seed();
        let bundle = match &d.csv_path {
            Some(p) => ingest_csv(p, &d.label_column, seed)?,
            None => make_blobs(d.n, d.d_x, d.classes, d.separation, seed)?,
        };
        if bundle.train_indices().is_empty() || bundle.test_indices().is_empty() {
            return Err(HarnessError::Config(
                "dataset has an empty train or test split".into(),
            ));
        }
        let bundle = bundle.with_train_label_noise(d.label_noise, derive_seed(seed, "label-noise"));
        Ok(bundle.save(&self.dir(Stage::Data).join("dataset.json"))?)
    }

    fn pretrain_zoo(&self) -> Result<(), HarnessError> {
        let space = self.load_space()?;
        let split = self.load_split()?;
        let data = self.load_data()?;
        let dims = self.net_dims(&data);
        let dir = self.dir(Stage::Zoo);
        let ids: Vec<&String> = split.zoo_train.iter().chain(&split.zoo_val).collect();
        let entries = self.pool.install(|| {
            ids.par_iter()
                .map(|id| {
                    let arch = &space[*id];
                    let net = MaterializedNet::materialize(
                        arch,
                        dims,
                        derive_seed(self.seed, &format!("zoo-init/{id}")),
                    )?;
                    let rec = pretrain(
                        net,
                        &data,
                        &self.config.zoo.train,
                        derive_seed(self.seed, &format!("zoo-train/{id}")),
                    )?;
                    save_record(&dir, &rec)
                })
                .collect::<Result<Vec<_>, ZooError>>()
        })?;
        Ok(write_index(&dir, &entries)?)
    }

    fn train_encoder(&self) -> Result<(), HarnessError> {
        let space: Vec<Architecture> = self.load_space()?.into_values().collect();
        let (enc, report) = train_encoder(&space, &self.config.encoder, derive_seed(self.seed, "encoder"))?;
        let dir = self.dir(Stage::Encoder);
        enc.save(&dir)?;
        write_json(&dir.join("report.json"), &report)
    }

    pub fn load_encoder(&self) -> Result<GraphEncoder, HarnessError> {
        Ok(GraphEncoder::load(&self.dir(Stage::Encoder))?)
    }

    pub fn load_approximator(&self, v: ApproxVariant) -> Result<ModelApproximator, HarnessError> {
        Ok(ModelApproximator::load(&self.approx_dir(v))?)
    }

    pub fn load_scorer(&self, v: ApproxVariant, b: usize) -> Result<InductiveScorer, HarnessError> {
        Ok(InductiveScorer::load(&self.inductive_dir(v, b))?)
    }

    fn examples(
        &self,
        ids: &[String],
        space: &BTreeMap<String, Architecture>,
        enc: &GraphEncoder,
    ) -> Result<Vec<ApproxExample>, HarnessError> {
        let zoo = self.dir(Stage::Zoo);
        ids.iter()
            .map(|id| {
                let arch = &space[id];
                let emb = enc.encode(arch)?;
                Ok(ApproxExample {
                    arch_id: id.clone(),
                    ordered_h: ordered_embedding(&emb, arch)?,
                    targets: load_predictions(&zoo, &read_entry(&zoo, id)?)?,
                })
            })
            .collect()
    }

    fn train_approximators(&self) -> Result<(), HarnessError> {
        let space = self.load_space()?;
        let split = self.load_split()?;
        let data = self.load_data()?;
        let enc = self.load_encoder()?;
        let features = data.feature_matrix(&data.train_indices());
        let train = self.examples(&split.zoo_train, &space, &enc)?;
        let val = self.examples(&split.zoo_val, &space, &enc)?;
        let variants = self.variants();
        self.pool.install(|| {
            variants
                .par_iter()
                .map(|&v| {
                    let cfg = ApproxConfig {
                        variant: v,
                        ..self.config.approximator.clone()
                    };
                    let seed = derive_seed(self.seed, &format!("approximator/{}", v.name()));
                    let (model, report) = train_approximator(&train, &val, &features, &cfg, seed)?;
                    let dir = self.approx_dir(v);
                    model.save(&dir)?;
                    write_json(&dir.join("report.json"), &report)
                })
                .collect::<Result<Vec<()>, HarnessError>>()
        })?;
        Ok(())
    }

    fn arch_view(
        &self,
        arch: &Architecture,
        enc: &GraphEncoder,
        approx: &ModelApproximator,
        features: &Tensor,
        labels: &[usize],
    ) -> Result<ArchView, HarnessError> {
        let start = Instant::now();
        let emb = enc.encode(arch)?;
        let ordered_h = ordered_embedding(&emb, arch)?;
        let view = InstanceView::compute(approx, &ordered_h, features, labels)?;
        Ok(ArchView {
            pooled_h: column_mean(&emb.h),
            view,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn train_inductive(&self) -> Result<(), HarnessError> {
        let space = self.load_space()?;
        let split = self.load_split()?;
        let data = self.load_data()?;
        let enc = self.load_encoder()?;
        let train_idx = data.train_indices();
        let features = data.feature_matrix(&train_idx);
        let labels = data.labels_of(&train_idx);
        let mut jobs = Vec::new();
        for v in self.variants() {
            let approx = self.load_approximator(v)?;
            let examples: Vec<InductiveExample> = split
                .zoo_train
                .iter()
                .map(|id| {
                    let av = self.arch_view(&space[id], &enc, &approx, &features, &labels)?;
                    Ok(InductiveExample {
                        arch_id: id.clone(),
                        pooled_h: av.pooled_h,
                        view: av.view,
                    })
                })
                .collect::<Result<_, HarnessError>>()?;
            let examples = std::sync::Arc::new(examples);
            for (_, b) in self.budgets(train_idx.len()) {
                jobs.push((v, b, examples.clone()));
            }
        }
        self.pool.install(|| {
            jobs.par_iter()
                .map(|(v, b, examples)| {
                    let seed = derive_seed(self.seed, &format!("inductive/{}/{b}", v.name()));
                    let (scorer, report) =
                        train_inductive(examples, &features, &labels, *b, &self.config.inductive, seed)?;
                    let dir = self.inductive_dir(*v, *b);
                    scorer.save(&dir)?;
                    write_json(&dir.join("report.json"), &report)
                })
                .collect::<Result<Vec<()>, HarnessError>>()
        })?;
        Ok(())
    }

    fn select(&self) -> Result<(), HarnessError> {
        let space = self.load_space()?;
        let split = self.load_split()?;
        let data = self.load_data()?;
        let encoder = self.load_encoder()?;
        let train_idx = data.train_indices();
        let n = train_idx.len();
        let features = data.feature_matrix(&train_idx);
        let labels = data.labels_of(&train_idx);
        let budgets = self.budgets(n);
        let mut approximators = BTreeMap::new();
        let mut scorers = BTreeMap::new();
        for v in self.variants() {
            approximators.insert(v, self.load_approximator(v)?);
            for &(_, b) in &budgets {
                scorers.insert((v, b), self.load_scorer(v, b)?);
            }
        }
        let mut facility = BTreeMap::new();
        if self.config.methods.contains(&Method::FacilityLocation) {
            for &(_, b) in &budgets {
                let start = Instant::now();
                let (order, _) = select_facility_location(&features, b, self.config.baseline.similarity)?;
                facility.insert(b, (order, start.elapsed().as_secs_f64()));
            }
        }
        let ctx = SelectContext {
            space: &space,
            data: &data,
            features: &features,
            labels: &labels,
            encoder: &encoder,
            approximators: &approximators,
            scorers: &scorers,
            facility: &facility,
        };
        let per_arch = self.pool.install(|| {
            split
                .test_archs
                .par_iter()
                .map(|id| self.select_arch(&ctx, id, &budgets))
                .collect::<Result<Vec<_>, HarnessError>>()
        })?;
        let cells: Vec<SelectionCell> = per_arch.into_iter().flatten().collect();
        write_json(&self.dir(Stage::Select).join("index.json"), &cells)
    }

    fn select_arch(
        &self,
        ctx: &SelectContext,
        id: &str,
        budgets: &[(f64, usize)],
    ) -> Result<Vec<SelectionCell>, HarnessError> {
        let c = &self.config;
        let arch = &ctx.space[id];
        let n = ctx.labels.len();
        let primary = c.approximator.variant;
        let needs_view = c.ablation || c.methods.iter().any(|m| m.uses_approximator());
        let mut views = BTreeMap::new();
        if needs_view {
            for (v, approx) in ctx.approximators {
                views.insert(
                    *v,
                    self.arch_view(arch, ctx.encoder, approx, ctx.features, ctx.labels)?,
                );
            }
        }
        let mut cells = Vec::new();
        let mut emit = |label: &str,
                        b_frac: f64,
                        b: usize,
                        extra_seconds: f64,
                        run: &mut dyn FnMut(u64) -> Result<SubsetSelection, HarnessError>|
         -> Result<(), HarnessError> {
            let seed = derive_seed(self.seed, &format!("select/{label}/{b}/{id}"));
            let (result, seconds, model, surrogate) = counted(|| run(seed));
            let mut cell = SelectionCell {
                method: label.to_string(),
                arch_id: id.to_string(),
                b,
                b_frac,
                status: CellStatus::Ok,
                file: None,
                seconds: seconds + extra_seconds,
                model_grad_evals: model,
                surrogate_grad_evals: surrogate,
            };
            match result.and_then(|mut sel| {
                sel.method = label.to_string();
                sel.validate(n)?;
                Ok(sel)
            }) {
                Ok(sel) => {
                    let file = selection_file(label, b, id);
                    sel.save(&self.root.join(&file))?;
                    cell.file = Some(file);
                }
                Err(e) => {
                    cell.status = CellStatus::Failed {
                        reason: e.to_string(),
                    }
                }
            }
            cells.push(cell);
            Ok(())
        };
        for &(b_frac, b) in budgets {
            for &method in &c.methods {
                let pv = views.get(&primary);
                let view_secs = pv.map_or(0.0, |v| v.seconds);
                match method {
                    Method::Transductive => {
                        let av = pv.unwrap();
                        emit(method.name(), b_frac, b, view_secs, &mut |seed| {
                            Ok(transductive_select(id, &av.view, b, seed, &c.transductive)?.sampled)
                        })?
                    }
                    Method::Inductive => {
                        let av = pv.unwrap();
                        let scorer = &ctx.scorers[&(primary, b)];
                        emit(method.name(), b_frac, b, view_secs, &mut |seed| {
                            let (sel, _) = inductive_select(
                                scorer,
                                id,
                                &av.pooled_h,
                                &av.view,
                                ctx.features,
                                ctx.labels,
                                b,
                                seed,
                            )?;
                            Ok(sel)
                        })?
                    }
                    Method::Hybrid => {
                        let av = pv.unwrap();
                        let scorer = &ctx.scorers[&(primary, b)];
                        for &big_frac in &c.hybrid_grid {
                            let big_b = fraction_count(big_frac, n);
                            let label = format!("hybrid-{big_frac}");
                            emit(&label, b_frac, b, view_secs, &mut |seed| {
                                if big_b < b {
                                    return Err(HarnessError::Metric(format!(
                                        "superset of {big_b} is smaller than budget {b}"
                                    )));
                                }
                                let pi = scorer.logits(&av.pooled_h, &av.view, ctx.features, ctx.labels)?;
                                Ok(hybrid_select(id, &pi, &av.view, big_b, b, seed, &c.transductive)?
                                    .selection)
                            })?
                        }
                    }
                    Method::Random => emit(method.name(), b_frac, b, 0.0, &mut |seed| {
                        let idx = select_random(n, b, seed)?;
                        Ok(selection_record(
                            BaselineMethod::Random,
                            id,
                            b,
                            seed,
                            idx,
                            &c.baseline,
                        ))
                    })?,
                    Method::FacilityLocation => {
                        let (order, secs) = &ctx.facility[&b];
                        emit(method.name(), b_frac, b, *secs, &mut |seed| {
                            Ok(selection_record(
                                BaselineMethod::FacilityLocation,
                                id,
                                b,
                                seed,
                                order.clone(),
                                &c.baseline,
                            ))
                        })?
                    }
                    Method::BottomBLoss => {
                        let av = pv.unwrap();
                        emit(method.name(), b_frac, b, view_secs, &mut |seed| {
                            let idx =
                                select_bottom_b_loss(&av.view.losses, b, c.baseline.gumbel_scale, seed)?;
                            Ok(selection_record(
                                BaselineMethod::BottomBLoss,
                                id,
                                b,
                                seed,
                                idx,
                                &c.baseline,
                            ))
                        })?
                    }
                    Method::El2n | Method::Grand => {
                        let bm = if method == Method::El2n {
                            BaselineMethod::El2n
                        } else {
                            BaselineMethod::Grand
                        };
                        let dims = self.net_dims(ctx.data);
                        emit(method.name(), b_frac, b, 0.0, &mut |seed| {
                            let s = select_by_difficulty(
                                bm,
                                arch,
                                dims,
                                ctx.data,
                                b,
                                c.baseline.warmup_epochs,
                                seed,
                            )?;
                            Ok(selection_record(bm, id, b, seed, s.indices, &c.baseline))
                        })?
                    }
                }
            }
            if c.ablation {
                for (v, av) in &views {
                    for sampler in ABLATION_SAMPLERS {
                        let label = format!("ablation-{}-{sampler}", v.name());
                        let scorer = &ctx.scorers[&(*v, b)];
                        emit(&label, b_frac, b, av.seconds, &mut |seed| {
                            let idx = match sampler {
                                "uncertainty" => {
                                    let h: Vec<f64> = (0..av.view.probs.rows())
                                        .map(|r| entropy(av.view.probs.row_slice(r)))
                                        .collect();
                                    argtop_b(&h, b)?
                                }
                                "loss" => select_bottom_b_loss(&av.view.losses, b, None, seed)?,
                                _ => {
                                    inductive_select(
                                        scorer,
                                        id,
                                        &av.pooled_h,
                                        &av.view,
                                        ctx.features,
                                        ctx.labels,
                                        b,
                                        seed,
                                    )?
                                    .0
                                    .indices
                                }
                            };
                            Ok(SubsetSelection {
                                arch_id: id.to_string(),
                                method: String::new(),
                                b,
                                seed,
                                indices: idx,
                                pi_digest: String::new(),
                                config_digest: digest_json(&(v.name(), sampler)),
                            })
                        })?
                    }
                }
            }
        }
        Ok(cells)
    }

    fn train_on_subsets(&self) -> Result<(), HarnessError> {
        let space = self.load_space()?;
        let split = self.load_split()?;
        let data = self.load_data()?;
        let index: Vec<SelectionCell> = read_json(&self.dir(Stage::Select).join("index.json"))?;
        let mut by_arch: BTreeMap<&str, Vec<&SelectionCell>> = BTreeMap::new();
        for cell in &index {
            by_arch.entry(cell.arch_id.as_str()).or_default().push(cell);
        }
        let dims = self.net_dims(&data);
        let results = self.pool.install(|| {
            split
                .test_archs
                .par_iter()
                .map(|id| {
                    let cells = by_arch.get(id.as_str()).cloned().unwrap_or_default();
                    let out = self.train_arch(&space[id], dims, &data, &cells)?;
                    write_json(&self.dir(Stage::Downstream).join(format!("{id}.json")), &out)?;
                    Ok(out.arch_id)
                })
                .collect::<Result<Vec<_>, HarnessError>>()
        })?;
        write_json(&self.dir(Stage::Downstream).join("index.json"), &results)
    }

    fn train_arch(
        &self,
        arch: &Architecture,
        dims: NetDims,
        data: &DatasetBundle,
        cells: &[&SelectionCell],
    ) -> Result<DownstreamArch, HarnessError> {
        let cfg = self.config.downstream_config();
        let train_idx = data.train_indices();
        let test_idx = data.test_indices();
        let init_seed = derive_seed(self.seed, &format!("downstream-init/{}", arch.id));
        let train_seed = derive_seed(self.seed, &format!("downstream-train/{}", arch.id));
        // Every subset of one architecture starts from the same weights and
        // batch stream so that accuracy differences come from the subset.
        let fit = |subset: &[usize], method: &str, b: usize, b_frac: f64| -> DownstreamCell {
            let mut cell = DownstreamCell {
                method: method.to_string(),
                b,
                b_frac,
                status: CellStatus::Ok,
                test_acc: None,
                seconds: 0.0,
                grad_evals: 0,
            };
            let result = MaterializedNet::materialize(arch, dims, init_seed).and_then(|mut net| {
                let stats = train_net(&mut net, data, subset, &cfg, train_seed)?;
                Ok((accuracy(&net, data, &test_idx), stats))
            });
            match result {
                Ok((acc, stats)) => {
                    cell.test_acc = Some(acc);
                    cell.seconds = stats.seconds;
                    cell.grad_evals = stats.grad_evals;
                }
                Err(e) => {
                    cell.status = CellStatus::Failed {
                        reason: e.to_string(),
                    }
                }
            }
            cell
        };
        let full = fit(&train_idx, "full", train_idx.len(), 1.0);
        let mut out = Vec::with_capacity(cells.len());
        for sc in cells {
            let file = match (&sc.status, &sc.file) {
                (CellStatus::Ok, Some(f)) => f,
                _ => {
                    out.push(DownstreamCell {
                        method: sc.method.clone(),
                        b: sc.b,
                        b_frac: sc.b_frac,
                        status: CellStatus::Failed {
                            reason: format!("selection failed: {}", sc.status.reason()),
                        },
                        test_acc: None,
                        seconds: 0.0,
                        grad_evals: 0,
                    });
                    continue;
                }
            };
            let sel = SubsetSelection::load(&self.root.join(file))?;
            sel.validate(train_idx.len())?;
            let subset: Vec<usize> = sel.indices.iter().map(|&p| train_idx[p]).collect();
            out.push(fit(&subset, &sc.method, sc.b, sc.b_frac));
        }
        Ok(DownstreamArch {
            arch_id: arch.id.clone(),
            full,
            cells: out,
        })
    }
}

/// Runs every seed of `config`. A single seed uses `root` directly; several
/// seeds each get `root/seed-<n>` plus an aggregate under `root/report`.
pub fn run_all(
    config: &ExperimentConfig,
    root: &Path,
    workers: usize,
) -> Result<(Vec<PipelineOutcome>, Option<MultiSeedReport>), HarnessError> {
    config.validate()?;
    if let [seed] = config.seeds[..] {
        let p = Pipeline::new(config.clone(), root, seed, workers)?;
        return Ok((vec![p.run()?], None));
    }
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let p = Pipeline::new(config.clone(), root.join(format!("seed-{seed}")), seed, workers)?;
        outcomes.push(p.run()?);
    }
    let reports: Vec<RunReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let agg = aggregate_reports(&reports)?;
    write_aggregate(&root.join("report"), &agg)?;
    Ok((outcomes, Some(agg)))
}
