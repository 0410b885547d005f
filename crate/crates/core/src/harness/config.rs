use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::approximator::ApproxConfig;
use crate::archspace::Constraints;
use crate::baselines::BaselineConfig;
use crate::digest::digest_json;
use crate::encoder::EncoderConfig;
use crate::sampler::{InductiveConfig, TransductiveConfig};
use crate::zoo::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Transductive,
    Inductive,
    /// Expanded over the hybrid superset grid.
    Hybrid,
    Random,
    FacilityLocation,
    BottomBLoss,
    El2n,
    Grand,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Transductive,
        Method::Inductive,
        Method::Hybrid,
        Method::Random,
        Method::FacilityLocation,
        Method::BottomBLoss,
        Method::El2n,
        Method::Grand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Transductive => "transductive",
            Method::Inductive => "inductive",
            Method::Hybrid => "hybrid",
            Method::Random => "random",
            Method::FacilityLocation => "facility-location",
            Method::BottomBLoss => "bottom-b-loss",
            Method::El2n => "el2n",
            Method::Grand => "grand",
        }
    }

    /// Whether the method reads the encoder and approximator.
    pub fn uses_approximator(self) -> bool {
        matches!(
            self,
            Method::Transductive | Method::Inductive | Method::Hybrid | Method::BottomBLoss
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSpec {
    pub count: usize,
    pub max_nodes: usize,
    pub max_edges: usize,
    /// Fixes the space and its split across run seeds when set.
    pub seed: Option<u64>,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        let c = Constraints::default();
        Self {
            count: 100,
            max_nodes: c.max_nodes,
            max_edges: c.max_edges,
            seed: None,
        }
    }
}

impl SpaceSpec {
    pub fn constraints(&self) -> Constraints {
        Constraints {
            max_nodes: self.max_nodes,
            max_edges: self.max_edges,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// Sizes of the three parts of `n` items; test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let tr = ((self.train * n as f64).round() as usize).min(n);
        let va = ((self.val * n as f64).round() as usize).min(n - tr);
        (tr, va, n - tr - va)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// When set, rows come from this CSV instead of synthetic blobs.
    pub csv_path: Option<PathBuf>,
    pub label_column: String,
    pub n: usize,
    pub d_x: usize,
    pub classes: usize,
    pub separation: f64,
    /// Fraction of training labels flipped to another class.
    pub label_noise: f64,
    /// Fixes the dataset across run seeds when set.
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            csv_path: None,
            label_column: "label".into(),
            n: 600,
            d_x: 16,
            classes: 3,
            separation: 3.0,
            label_noise: 0.0,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSpec {
    pub train_archs: usize,
    pub val_archs: usize,
    pub test_archs: usize,
    pub d_hidden: usize,
    pub train: TrainConfig,
}

impl Default for ZooSpec {
    fn default() -> Self {
        Self {
            train_archs: 12,
            val_archs: 4,
            test_archs: 20,
            d_hidden: 16,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub space: SpaceSpec,
    pub split: SplitFractions,
    pub dataset: DatasetSpec,
    pub zoo: ZooSpec,
    /// Subset sizes as fractions of the training rows.
    pub budgets: Vec<f64>,
    pub methods: Vec<Method>,
    /// Hybrid superset sizes as fractions of the training rows.
    pub hybrid_grid: Vec<f64>,
    /// Recipe for training test architectures; defaults to the zoo recipe.
    pub downstream: Option<TrainConfig>,
    pub encoder: EncoderConfig,
    pub approximator: ApproxConfig,
    pub transductive: TransductiveConfig,
    pub inductive: InductiveConfig,
    pub baseline: BaselineConfig,
    pub ranking_k: usize,
    /// Also run the approximator-variant by sampler matrix.
    pub ablation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            space: SpaceSpec::default(),
            split: SplitFractions::default(),
            dataset: DatasetSpec::default(),
            zoo: ZooSpec::default(),
            budgets: vec![0.1],
            methods: Method::ALL.to_vec(),
            hybrid_grid: vec![0.3],
            downstream: None,
            encoder: EncoderConfig::default(),
            approximator: ApproxConfig::default(),
            transductive: TransductiveConfig::default(),
            inductive: InductiveConfig::default(),
            baseline: BaselineConfig::default(),
            ranking_k: 15,
            ablation: false,
        }
    }
}

fn fraction_ok(f: f64) -> bool {
    f > 0.0 && f <= 1.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn downstream_config(&self) -> TrainConfig {
        self.downstream.unwrap_or(self.zoo.train)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.budgets.is_empty() || self.methods.is_empty() {
            return bad("budgets and methods must not be empty".into());
        }
        if let Some(f) = self
            .budgets
            .iter()
            .chain(&self.hybrid_grid)
            .find(|f| !fraction_ok(**f))
        {
            return bad(format!("fraction {f} is not in (0, 1]"));
        }
        if self.methods.contains(&Method::Hybrid) && self.hybrid_grid.is_empty() {
            return bad("hybrid needs a non-empty hybrid_grid".into());
        }
        let s = self.split;
        if ![s.train, s.val, s.test].into_iter().all(fraction_ok)
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return bad(format!("split fractions {s:?} must be in (0, 1] and sum to 1"));
        }
        let (tr, va, te) = s.sizes(self.space.count);
        let z = &self.zoo;
        if z.train_archs == 0 || z.val_archs == 0 || z.test_archs == 0 {
            return bad("zoo needs at least one train, val and test architecture".into());
        }
        if z.train_archs > tr || z.val_archs > va || z.test_archs > te {
            return bad(format!(
                "space of {} splits into {tr}/{va}/{te}, too small for {}/{}/{} architectures",
                self.space.count, z.train_archs, z.val_archs, z.test_archs
            ));
        }
        if z.d_hidden == 0 {
            return bad("zoo d_hidden must be positive".into());
        }
        for t in [z.train, self.downstream_config()] {
            if t.epochs == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
                return bad(format!("invalid training recipe {t:?}"));
            }
        }
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.label_noise) {
            return bad(format!("label_noise {} is not in [0, 1)", d.label_noise));
        }
        if self.ranking_k == 0 {
            return bad("ranking_k must be positive".into());
        }
        let t = &self.transductive;
        if t.steps == 0 || !(t.lr > 0.0) || t.lambda < 0.0 {
            return bad(format!("invalid transductive config {t:?}"));
        }
        let i = &self.inductive;
        if i.lambda < 0.0 || i.lambda_budget < 0.0 || !(i.lr > 0.0) {
            return bad(format!("invalid inductive config {i:?}"));
        }
        self.encoder
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.approximator
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.baseline
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Rounds a fraction of `n` to a count in `1..=n`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_eq!(c.split.sizes(100), (70, 10, 20));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seeds": [3], "budgets": [0.2]}"#).unwrap();
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.zoo.train_archs, 12);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"budget": [0.2]}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        c.budgets = vec![0.0];
        assert!(c.validate().is_err());
        c.budgets = vec![];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.hybrid_grid = vec![1.5];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.zoo.test_archs = 21;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.split.train = 0.8;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.budgets = vec![0.2];
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn counts_are_clamped() {
        assert_eq!(fraction_count(0.1, 420), 42);
        assert_eq!(fraction_count(1.0, 420), 420);
        assert_eq!(fraction_count(0.0001, 420), 1);
    }
}
