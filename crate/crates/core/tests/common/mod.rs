#![allow(dead_code)]

use subselnet::harness::{ExperimentConfig, Method};

/// Three test architectures on a small blob dataset with short training.
pub fn smoke_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.space.count = 30;
    c.zoo.train_archs = 4;
    c.zoo.val_archs = 2;
    c.zoo.test_archs = 3;
    c.zoo.train.epochs = 8;
    c.dataset.n = 200;
    c.dataset.label_noise = 0.2;
    c.encoder.epochs = 2;
    c.encoder.batch_size = 8;
    c.approximator.epochs = 3;
    c.inductive.epochs = 5;
    c.transductive.steps = 50;
    c.baseline.warmup_epochs = 2;
    c.budgets = vec![0.1, 1.0];
    c.methods = Method::ALL.to_vec();
    c.hybrid_grid = vec![0.1, 0.3, 1.0];
    c.ranking_k = 2;
    c
}
