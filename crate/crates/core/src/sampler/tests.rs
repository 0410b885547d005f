use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{grad_evaluations, GradTag, ParamSet};

/// Every ordered list of `b` distinct indices below `n`.
fn ordered_subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
    if b == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for prefix in ordered_subsets(n, b - 1) {
        for i in 0..n {
            if !prefix.contains(&i) {
                let mut s = prefix.clone();
                s.push(i);
                out.push(s);
            }
        }
    }
    out
}

fn random_pi(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn uniform_pairs_are_equally_likely() {
    for s in ordered_subsets(3, 2) {
        assert!((sequence_prob(&[0.0; 3], &s).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }
}

#[test]
fn single_draw_closed_form() {
    let p = sequence_prob(&[2f64.ln(), 0.0], &[0]).unwrap();
    assert!((p - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn invalid_orders_are_rejected() {
    assert!(matches!(
        sequence_prob(&[0.0; 3], &[1, 1]),
        Err(SamplerError::RepeatedIndex(1))
    ));
    assert!(matches!(
        sequence_prob(&[0.0; 3], &[3]),
        Err(SamplerError::OutOfRange { .. })
    ));
    assert!(matches!(
        sample_subset(&[0.0; 3], 4, 0),
        Err(SamplerError::BudgetTooLarge { .. })
    ));
}

proptest! {
    #[test]
    fn ordered_probabilities_sum_to_one(n in 1usize..=6, b in 0usize..=3, seed in 0u64..10_000) {
        prop_assume!(b <= n);
        let pi = random_pi(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let total: f64 = ordered_subsets(n, b).iter().map(|s| sequence_prob(&pi, s).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shift_leaves_sampler_unchanged(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let pi = random_pi(6, &mut ChaCha8Rng::seed_from_u64(seed));
        let moved: Vec<f64> = pi.iter().map(|p| p + shift).collect();
        let s = [4, 1, 2];
        prop_assert!((sequence_prob(&pi, &s).unwrap() - sequence_prob(&moved, &s).unwrap()).abs() < 1e-12);
        prop_assert_eq!(argtop_b(&pi, 3).unwrap(), argtop_b(&moved, 3).unwrap());
        prop_assert!((sampler_entropy(&pi) - sampler_entropy(&moved)).abs() < 1e-12);
    }

    #[test]
    fn samples_are_valid(seed in 0u64..10_000, n in 1usize..30, frac in 0.0f64..=1.0) {
        let b = ((n as f64) * frac) as usize;
        let pi = random_pi(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = sample_subset(&pi, b, seed).unwrap();
        prop_assert_eq!(s.len(), b);
        prop_assert!(check_ordered(&s, n).is_ok());
        prop_assert_eq!(s, sample_subset(&pi, b, seed).unwrap());
    }
}

#[test]
fn full_budget_is_a_permutation() {
    let mut s = sample_subset(&[0.3, -1.0, 2.0, 0.0], 4, 5).unwrap();
    s.sort_unstable();
    assert_eq!(s, vec![0, 1, 2, 3]);
}

#[test]
fn dominant_logit_is_almost_always_drawn() {
    let mut pi = vec![0.0; 6];
    pi[2] = 20.0;
    let hits = (0..10_000)
        .filter(|&s| sample_subset(&pi, 1, s).unwrap()[0] == 2)
        .count();
    assert!(hits >= 9_990, "{hits}");
}

#[test]
fn gumbel_draws_match_sequence_probabilities() {
    let pi = random_pi(5, &mut ChaCha8Rng::seed_from_u64(17));
    let draws = 100_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for s in 0..draws {
        *counts.entry(sample_subset(&pi, 2, s).unwrap()).or_default() += 1;
    }
    let tv: f64 = ordered_subsets(5, 2)
        .iter()
        .map(|s| {
            let emp = *counts.get(s).unwrap_or(&0) as f64 / draws as f64;
            (emp - sequence_prob(&pi, s).unwrap()).abs()
        })
        .sum::<f64>()
        / 2.0;
    assert!(tv <= 0.02, "tv {tv}");
}

#[test]
fn entropy_limits() {
    assert!((sampler_entropy(&[0.7; 9]) - 9f64.ln()).abs() < 1e-12);
    let mut pi = vec![0.0; 5];
    pi[1] = 20.0;
    assert!(sampler_entropy(&pi) <= 1e-6);
}

#[test]
fn surrogate_closed_forms() {
    let losses = [0.5, 1.0, 2.0, 0.25];
    let mean = losses.iter().sum::<f64>() / 4.0;
    let got = surrogate_loss(&[1.3; 4], &losses, 2, 0.1);
    assert!((got - (2.0 * mean - 0.1 * 4f64.ln())).abs() < 1e-12);
    let concentrated = [-40.0, -40.0, 40.0, -40.0];
    assert!((surrogate_loss(&concentrated, &losses, 3, 0.0) - 3.0 * 2.0).abs() < 1e-9);
}

#[test]
fn surrogate_tracks_exact_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let losses: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
    let subsets = ordered_subsets(5, 2);
    for _ in 0..20 {
        let pi = random_pi(5, &mut rng);
        let exact: f64 = subsets
            .iter()
            .map(|s| sequence_prob(&pi, s).unwrap() * s.iter().map(|&i| losses[i]).sum::<f64>())
            .sum();
        let approx = surrogate_loss(&pi, &losses, 2, 0.0);
        // Mean-field bias measured up to about 0.21 on these draws.
        assert!((approx - exact).abs() <= 0.25 * exact, "{approx} vs {exact}");
    }
}

#[test]
fn surrogate_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let losses: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..3.0)).collect();
    let mut params = ParamSet::new();
    params.add("pi", Tensor::row(&random_pi(8, &mut rng))).unwrap();
    let report = check_gradients(
        &params,
        |tape, bound| surrogate_var(tape, bound.vars()[0], &losses, 3, 0.1),
        1e-5,
        1,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    let mut t = Tape::new();
    let bound = params.bind_frozen(&mut t);
    let v = surrogate_var(&mut t, bound.vars()[0], &losses, 3, 0.1);
    let direct = surrogate_loss(params.get(params.id("pi").unwrap()).value.data(), &losses, 3, 0.1);
    assert!((t.scalar(v) - direct).abs() < 1e-12);
}

#[test]
fn inclusion_probs_sum_to_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for b in 1..6 {
        let pi: Vec<f64> = (0..6).map(|_| rng.gen_range(-12.0..12.0)).collect();
        let q = inclusion_probs(&pi, b);
        assert!((q.iter().sum::<f64>() - b as f64).abs() < 1e-9, "{q:?}");
        assert!(q.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    assert_eq!(inclusion_probs(&[0.3, -1.0], 2), vec![1.0, 1.0]);
    assert_eq!(inclusion_probs(&[0.3, -1.0], 0), vec![0.0, 0.0]);
    let q = inclusion_probs(&[0.0; 4], 3);
    assert!(q.iter().all(|x| (x - 0.75).abs() < 1e-9));
}

#[test]
fn inclusion_beats_mean_field_on_exact_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subsets = ordered_subsets(5, 3);
    let (mut err_mf, mut err_inc) = (0.0, 0.0);
    for _ in 0..30 {
        let losses: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
        let pi: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let exact: f64 = subsets
            .iter()
            .map(|s| sequence_prob(&pi, s).unwrap() * s.iter().map(|&i| losses[i]).sum::<f64>())
            .sum();
        err_mf += (surrogate_loss(&pi, &losses, 3, 0.0) - exact).abs();
        err_inc += (inclusion_loss(&pi, &losses, 3, 0.0) - exact).abs();
    }
    assert!(err_inc < 0.5 * err_mf, "{err_inc} vs {err_mf}");
}

#[test]
fn inclusion_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let losses: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..3.0)).collect();
    let mut params = ParamSet::new();
    params.add("pi", Tensor::row(&random_pi(8, &mut rng))).unwrap();
    for b in [1, 3, 7] {
        let report = check_gradients(
            &params,
            |tape, bound| inclusion_var(tape, bound.vars()[0], &losses, b, 0.1),
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.passes(1e-4), "b={b} {report:?}");
        let mut t = Tape::new();
        let bound = params.bind_frozen(&mut t);
        let v = inclusion_var(&mut t, bound.vars()[0], &losses, b, 0.1);
        let direct = inclusion_loss(params.get(params.id("pi").unwrap()).value.data(), &losses, b, 0.1);
        assert!((t.scalar(v) - direct).abs() < 1e-9);
    }
}

#[test]
fn inclusion_descent_finds_bottom_b() {
    let losses = [2.0, 0.1, 1.5, 0.3, 0.2, 3.0];
    let cfg = TransductiveConfig {
        lambda: 0.0,
        lr: 0.1,
        steps: 400,
        surrogate: Surrogate::Inclusion,
    };
    let (pi, _) = optimize_pi(&losses, 3, &cfg).unwrap();
    let mut top = argtop_b(&pi, 3).unwrap();
    top.sort_unstable();
    assert_eq!(top, vec![1, 3, 4]);
}

proptest! {
    #[test]
    fn inclusion_threshold_is_monotone_in_budget(
        pi in proptest::collection::vec(-8.0f64..8.0, 3..12),
    ) {
        let n = pi.len();
        let taus: Vec<f64> = (1..n).map(|b| inclusion_threshold(&pi, b)).collect();
        prop_assert!(taus.windows(2).all(|w| w[1] < w[0]));
    }
}

fn view(losses: Vec<f64>) -> InstanceView {
    let n = losses.len();
    InstanceView {
        probs: Tensor::full(n, 2, 0.5),
        losses,
    }
}

#[test]
fn unregularized_optimum_picks_lowest_losses() {
    let losses = vec![0.9, 0.2, 1.7, 0.05, 1.1, 0.6, 2.4, 0.4, 1.3, 0.75];
    let cfg = TransductiveConfig {
        lambda: 0.0,
        ..TransductiveConfig::default()
    };
    let before = grad_evaluations(GradTag::Surrogate);
    let out = transductive_select("a", &view(losses.clone()), 4, 1, &cfg).unwrap();
    assert_eq!(grad_evaluations(GradTag::Surrogate) - before, cfg.steps as u64);
    assert_eq!(out.grad_evals, cfg.steps as u64);
    let mut bottom: Vec<usize> = (0..losses.len()).collect();
    bottom.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]));
    bottom.truncate(4);
    assert_eq!(out.argtop.indices, bottom);
}

#[test]
fn transductive_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let losses: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..2.0)).collect();
    let cfg = TransductiveConfig::default();
    let a = transductive_select("a", &view(losses.clone()), 7, 9, &cfg).unwrap();
    let b = transductive_select("a", &view(losses), 7, 9, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.sampled.validate(50).is_ok());
    assert!(a.argtop.validate(50).is_ok());
}

#[test]
fn hybrid_degenerate_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 40;
    let v = view((0..n).map(|_| rng.gen_range(0.0..2.0)).collect());
    let ind_pi = random_pi(n, &mut rng);
    let cfg = TransductiveConfig::default();
    let same = hybrid_select("a", &ind_pi, &v, 6, 6, 3, &cfg).unwrap();
    assert_eq!(same.selection.indices, same.superset);
    assert_eq!(same.grad_evals, 0);

    let full = hybrid_select("a", &ind_pi, &v, n, 6, 3, &cfg).unwrap();
    let trans = transductive_select("a", &v, 6, 3, &cfg).unwrap();
    assert_eq!(full.selection.indices, trans.sampled.indices);

    for big in [6, 10, 20, 30, 40] {
        let h = hybrid_select("a", &ind_pi, &v, big, 6, 3, &cfg).unwrap();
        assert_eq!(h.selection.indices.len(), 6);
        assert!(h.selection.indices.iter().all(|i| h.superset.contains(i)));
    }
    assert!(hybrid_select("a", &ind_pi, &v, 5, 6, 3, &cfg).is_err());
}

fn inductive_fixture(archs: usize, n: usize) -> (Vec<InductiveExample>, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let examples = (0..archs)
        .map(|a| {
            let mut probs = Tensor::zeros(n, 2);
            for i in 0..n {
                let p0 = 1.0 / (1.0 + (-(features.get(i, 0) * (a as f64 + 1.0))).exp());
                probs.set(i, 0, p0);
                probs.set(i, 1, 1.0 - p0);
            }
            let losses = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -probs.get(i, y).ln())
                .collect();
            InductiveExample {
                arch_id: format!("arch{a}"),
                pooled_h: (0..4).map(|k| (a * 4 + k) as f64 * 0.1).collect(),
                view: InstanceView { probs, losses },
            }
        })
        .collect();
    (examples, features, labels)
}

#[test]
fn inductive_scores_track_budget_and_need_no_gradients() {
    let (examples, features, labels) = inductive_fixture(4, 80);
    let b = 16;
    let cfg = InductiveConfig {
        epochs: 150,
        ..InductiveConfig::default()
    };
    let (scorer, report) = train_inductive(&examples, &features, &labels, b, &cfg, 1).unwrap();
    for s in &report.score_sums {
        assert!((s - b as f64).abs() <= 0.25 * b as f64, "{:?}", report.score_sums);
    }
    let ex = &examples[0];
    let scores = inductive_scores(&scorer, &ex.pooled_h, &ex.view, &features, &labels).unwrap();
    assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));

    let tags = [GradTag::ModelTraining, GradTag::Surrogate, GradTag::Auxiliary];
    let before: Vec<u64> = tags.iter().map(|&t| grad_evaluations(t)).collect();
    let (sel, _) = inductive_select(&scorer, "x", &ex.pooled_h, &ex.view, &features, &labels, b, 5).unwrap();
    let after: Vec<u64> = tags.iter().map(|&t| grad_evaluations(t)).collect();
    assert_eq!(before, after);
    assert!(sel.validate(80).is_ok());
    let (again, _) =
        inductive_select(&scorer, "x", &ex.pooled_h, &ex.view, &features, &labels, b, 5).unwrap();
    assert_eq!(sel, again);

    let dir = tempfile::tempdir().unwrap();
    scorer.save(dir.path()).unwrap();
    let back = InductiveScorer::load(dir.path()).unwrap();
    assert_eq!(back.dims, scorer.dims);
}

#[test]
fn identical_inputs_score_identically() {
    let (mut examples, features, labels) = inductive_fixture(2, 20);
    examples[1].pooled_h = examples[0].pooled_h.clone();
    examples[1].view = examples[0].view.clone();
    let scorer = InductiveScorer::new(
        InductiveConfig::default(),
        ScorerDims {
            embedding_width: 4,
            d_x: 3,
            classes: 2,
        },
        0,
    )
    .unwrap();
    let a = scorer
        .logits(&examples[0].pooled_h, &examples[0].view, &features, &labels)
        .unwrap();
    let b = scorer
        .logits(&examples[1].pooled_h, &examples[1].view, &features, &labels)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn selection_file_round_trip() {
    let sel = SubsetSelection {
        arch_id: "abc".into(),
        method: "random".into(),
        b: 2,
        seed: 1,
        indices: vec![3, 0],
        pi_digest: String::new(),
        config_digest: "x".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sel/abc.json");
    sel.save(&path).unwrap();
    assert_eq!(SubsetSelection::load(&path).unwrap(), sel);
    assert!(sel.validate(4).is_ok());
    assert!(sel.validate(3).is_err());
}
