//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line, written
//! straight to stdout so it shows even when output capture is on.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subselnet::approximator::{ordered_embedding, ApproxConfig, ApproxDims, ModelApproximator};
use subselnet::archspace::{generate_space, Architecture, Constraints, OpCode};
use subselnet::baselines::{
    el2n_scores, facility_location_value, select_bottom_b_loss, select_facility_location, similarity_matrix,
    Similarity,
};
use subselnet::encoder::{EncoderConfig, GraphEncoder};
use subselnet::harness::{
    fraction_count, jaccard, ranking, ranking_metrics, run_all, CellStatus, ExperimentConfig, Method,
    MultiSeedReport, Pipeline, PipelineOutcome, SelectionCell,
};
use subselnet::numerics::gradcheck::check_gradients;
use subselnet::numerics::{grad_evaluations, GradTag, ParamSet, Tensor};
use subselnet::sampler::{
    hybrid_select, inductive_select, sample_subset, sequence_prob, surrogate_var, transductive_select,
    InstanceView,
};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id:>2} {:<4} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn ordered_subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
    if b == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for prefix in ordered_subsets(n, b - 1) {
        for i in (0..n).filter(|i| !prefix.contains(i)) {
            let mut s = prefix.clone();
            s.push(i);
            out.push(s);
        }
    }
    out
}

#[test]
fn c01_sampler_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let subsets = ordered_subsets(5, 2);
    let (mut worst_sum, mut worst_tv) = (0.0f64, 0.0f64);
    for draw in 0..5u64 {
        let pi: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let probs: Vec<f64> = subsets.iter().map(|s| sequence_prob(&pi, s).unwrap()).collect();
        worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
        let samples = 100_000u64;
        let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        for k in 0..samples {
            *counts
                .entry(sample_subset(&pi, 2, draw * samples + k).unwrap())
                .or_default() += 1;
        }
        let tv = 0.5
            * subsets
                .iter()
                .zip(&probs)
                .map(|(s, p)| (counts.get(s).copied().unwrap_or(0) as f64 / samples as f64 - p).abs())
                .sum::<f64>();
        worst_tv = worst_tv.max(tv);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "sampler exactness",
        worst_sum <= 1e-9 && worst_tv <= 0.02 && secs < 30.0,
        &format!("max |sum - 1| = {worst_sum:.2e}, max TV = {worst_tv:.4}, {secs:.1}s"),
    );
}

#[test]
fn c02_gradient_integrity() {
    let start = Instant::now();
    let enc = GraphEncoder::new(EncoderConfig::default(), 3).unwrap();
    let tri = Architecture::new(
        vec![OpCode::Input, OpCode::OpA, OpCode::Output],
        vec![(0, 1), (1, 2), (0, 2)],
    );
    let elbo = check_gradients(&enc.params, |t, b| enc.elbo_objective(t, b, &tri, 5), 1e-5, 1).unwrap();

    let h = ordered_embedding(&enc.encode(&tri).unwrap(), &tri).unwrap();
    let dims = ApproxDims {
        embedding_width: h.cols(),
        d_x: 16,
        classes: 3,
    };
    let approx = ModelApproximator::new(ApproxConfig::default(), dims, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::row(&(0..16).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
    let target = Tensor::row(&[0.2, 0.5, 0.3]);
    let kl = check_gradients(
        &approx.params,
        |t, b| approx.kl_objective(t, b, &h, &x, &target),
        1e-5,
        1,
    )
    .unwrap();

    let losses: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..3.0)).collect();
    let mut pi = ParamSet::new();
    pi.add(
        "pi",
        Tensor::row(&(0..8).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()),
    )
    .unwrap();
    let sur = check_gradients(
        &pi,
        |t, b| surrogate_var(t, b.vars()[0], &losses, 3, 0.1),
        1e-5,
        1,
    )
    .unwrap();

    let secs = start.elapsed().as_secs_f64();
    let pass = [&elbo, &kl, &sur].iter().all(|r| r.passes(1e-4) && r.checked > 0) && secs < 60.0;
    verdict(
        2,
        "gradient integrity",
        pass,
        &format!(
            "max rel err: elbo {:.1e} ({} entries), kl {:.1e} ({}), surrogate {:.1e} ({}), {secs:.1}s",
            elbo.max_rel_err, elbo.checked, kl.max_rel_err, kl.checked, sur.max_rel_err, sur.checked
        ),
    );
}

#[test]
fn c03_encoder_equivariance() {
    let enc = GraphEncoder::new(EncoderConfig::default(), 11).unwrap();
    let space = generate_space(7, 50, &Constraints::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for a in &space {
        let n = a.num_nodes();
        let ha = enc.encode(a).unwrap().h;
        for _ in 0..5 {
            let mut mid: Vec<usize> = (1..n - 1).collect();
            mid.shuffle(&mut rng);
            let mut perm = vec![0];
            perm.extend(mid);
            perm.push(n - 1);
            let hb = enc.encode(&a.permute_nodes(&perm)).unwrap().h;
            mismatches += (0..n)
                .filter(|&u| ha.row_slice(u) != hb.row_slice(perm[u]))
                .count();
        }
    }
    verdict(
        3,
        "encoder equivariance",
        mismatches == 0,
        &format!(
            "{} architectures x 5 permutations, {mismatches} rows differ",
            space.len()
        ),
    );
}

/// Default config: 12 + 4 zoo architectures on clean blobs (n = 600,
/// d_x = 16, 3 classes), 20 test architectures, random selection at
/// `b = |D_tr|`.
fn default_run() -> &'static (PipelineOutcome, Duration) {
    static RUN: OnceLock<(PipelineOutcome, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut c = ExperimentConfig::default();
        c.methods = vec![Method::Random];
        c.budgets = vec![1.0];
        let start = Instant::now();
        let (mut outcomes, _) = run_all(&c, &fresh_dir("default"), workers()).unwrap();
        (outcomes.remove(0), start.elapsed())
    })
}

#[test]
fn c04_approximator_fidelity() {
    let (outcome, elapsed) = default_run();
    let o = &outcome.report.overhead;
    let (kl, uniform) = (o.approximator_val_kl.unwrap(), o.uniform_val_kl.unwrap());
    let secs = elapsed.as_secs_f64();
    verdict(
        4,
        "approximator fidelity",
        kl < 0.5 * uniform && secs < 600.0,
        &format!(
            "val KL {kl:.4} vs uniform {uniform:.4} (ratio {:.3}), run {secs:.1}s",
            kl / uniform
        ),
    );
}

#[test]
fn c05_directional_rar() {
    let start = Instant::now();
    let mut c = ExperimentConfig::default();
    c.seeds = vec![0, 1, 2, 3, 4];
    c.space.seed = Some(0);
    c.dataset.label_noise = 0.3;
    c.methods = vec![Method::Transductive, Method::Inductive, Method::Random];
    c.budgets = vec![0.1];
    let (_, agg) = run_all(&c, &fresh_dir("directional"), workers()).unwrap();
    let agg: MultiSeedReport = agg.unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 1800.0;
    let mut detail = Vec::new();
    for m in ["transductive", "inductive"] {
        let cmp = agg.comparison(m, 0.1).unwrap();
        let ok = cmp.n_pairs == 20 && cmp.method_rar < cmp.baseline_rar && cmp.sign_test.p_value <= 0.1;
        pass &= ok;
        detail.push(format!(
            "{m} {:.4} vs random {:.4} ({}/{} wins, p = {:.4})",
            cmp.method_rar, cmp.baseline_rar, cmp.sign_test.wins, cmp.n_pairs, cmp.sign_test.p_value
        ));
    }
    detail.push(format!("{secs:.1}s"));
    verdict(5, "directional RAR", pass, &detail.join(", "));
}

#[test]
fn c06_full_selection_sanity() {
    let (outcome, _) = default_run();
    let s = outcome.report.summary_for("random", 1.0).unwrap();
    let rar = s.rar_mean.unwrap();
    verdict(
        6,
        "S = D sanity",
        s.n_ok == 20 && s.n_failed == 0 && rar.abs() <= 0.02,
        &format!("random at b = |D_tr| over {} architectures: RAR {rar:.4}", s.n_ok),
    );
}

/// Small trained pipeline that also ran EL2N, GraNd and hybrid selection.
fn smoke_run() -> &'static (ExperimentConfig, PathBuf) {
    static RUN: OnceLock<(ExperimentConfig, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut c = common::smoke_config();
        c.methods = vec![
            Method::Transductive,
            Method::Inductive,
            Method::Hybrid,
            Method::El2n,
            Method::Grand,
        ];
        c.budgets = vec![0.1];
        let dir = fresh_dir("smoke");
        run_all(&c, &dir, workers()).unwrap();
        (c, dir)
    })
}

#[test]
fn c07_hybrid_consistency() {
    let (c, dir) = smoke_run();
    let p = Pipeline::new(c.clone(), dir, c.seeds[0], 1).unwrap();
    let data = p.load_data().unwrap();
    let split = p.load_split().unwrap();
    let space = p.load_space().unwrap();
    let enc = p.load_encoder().unwrap();
    let approx = p.load_approximator(c.approximator.variant).unwrap();
    let train = data.train_indices();
    let n = train.len();
    let (x, y) = (data.feature_matrix(&train), data.labels_of(&train));
    let b = fraction_count(0.1, n);
    let scorer = p.load_scorer(c.approximator.variant, b).unwrap();
    let grid: Vec<usize> = [0.1, 0.3, 0.6, 1.0]
        .iter()
        .map(|f| fraction_count(*f, n))
        .collect();
    let (mut superset_equal, mut full_equal, mut contained, mut checked) = (true, true, true, 0);
    for id in &split.test_archs {
        let arch = &space[id];
        let emb = enc.encode(arch).unwrap();
        let view = InstanceView::compute(&approx, &ordered_embedding(&emb, arch).unwrap(), &x, &y).unwrap();
        let mut pooled = vec![0.0; emb.h.cols()];
        for r in 0..emb.h.rows() {
            for (o, v) in pooled.iter_mut().zip(emb.h.row_slice(r)) {
                *o += v / emb.h.rows() as f64;
            }
        }
        let pi = scorer.logits(&pooled, &view, &x, &y).unwrap();
        for seed in 0..3u64 {
            for &big in &grid {
                let h = hybrid_select(id, &pi, &view, big, b, seed, &c.transductive).unwrap();
                let sup: HashSet<usize> = h.superset.iter().copied().collect();
                contained &=
                    h.selection.indices.len() == b && h.selection.indices.iter().all(|i| sup.contains(i));
                if big == b {
                    superset_equal &= h.selection.indices == h.superset;
                }
                if big == n {
                    let t = transductive_select(id, &view, b, seed, &c.transductive).unwrap();
                    full_equal &= h.selection.indices == t.sampled.indices;
                }
                checked += 1;
            }
        }
    }
    verdict(
        7,
        "hybrid consistency",
        superset_equal && full_equal && contained,
        &format!(
            "{checked} selections over B in {grid:?}: B=b equals superset {superset_equal}, \
             B=|D_tr| equals transductive {full_equal}, subset of superset {contained}"
        ),
    );
}

#[test]
fn c08_baseline_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bound = 1.0 - (-1.0f64).exp();
    let mut worst_ratio = f64::INFINITY;
    for _ in 0..50 {
        let f = Tensor::matrix(8, 3, (0..24).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let sim = similarity_matrix(&f, Similarity::Dot);
        let (greedy, _) = select_facility_location(&f, 3, Similarity::Dot).unwrap();
        let mut opt = f64::NEG_INFINITY;
        for i in 0..8 {
            for j in i + 1..8 {
                for k in j + 1..8 {
                    opt = opt.max(facility_location_value(&sim, &[i, j, k]));
                }
            }
        }
        worst_ratio = worst_ratio.min(facility_location_value(&sim, &greedy) / opt);
    }
    let fl_ok = worst_ratio >= bound;

    let mut el2n_err = 0.0f64;
    for classes in [2usize, 3, 10] {
        let probs = Tensor::matrix(classes, classes, vec![1.0 / classes as f64; classes * classes]).unwrap();
        let labels: Vec<usize> = (0..classes).collect();
        let want = ((classes - 1) as f64 / classes as f64).sqrt();
        for s in el2n_scores(&probs, &labels) {
            el2n_err = el2n_err.max((s - want).abs());
        }
    }
    let el2n_ok = el2n_err < 1e-12;

    let mut sort_ok = true;
    for seed in 0..20u64 {
        let losses: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut order: Vec<usize> = (0..30).collect();
        order.sort_by(|a, b| losses[*a].total_cmp(&losses[*b]));
        let mut got = select_bottom_b_loss(&losses, 7, Some(0.0), seed).unwrap();
        let mut want = order[..7].to_vec();
        got.sort_unstable();
        want.sort_unstable();
        sort_ok &= got == want;
    }
    verdict(
        8,
        "baseline oracles",
        fl_ok && el2n_ok && sort_ok,
        &format!(
            "FL greedy / OPT min {worst_ratio:.4} (bound {bound:.4}), EL2N max err {el2n_err:.1e}, \
             zero-noise bottom-b equals sort {sort_ok}"
        ),
    );
}

#[test]
fn c09_ranking_metrics() {
    let items = ["a", "b", "c", "d"];
    let full: BTreeMap<String, f64> = items
        .iter()
        .enumerate()
        .map(|(i, a)| (a.to_string(), 4.0 - i as f64))
        .collect();
    let mut all = Vec::new();
    for a in 0..4 {
        for b in (0..4).filter(|&b| b != a) {
            for c in (0..4).filter(|&c| c != a && c != b) {
                let d = 6 - a - b - c;
                all.push(vec![a, b, c, d]);
            }
        }
    }
    let mut mismatches = 0;
    for p in &all {
        // p[r] is the item placed at rank r.
        let sub: BTreeMap<String, f64> = p
            .iter()
            .enumerate()
            .map(|(r, &i)| (items[i].to_string(), 4.0 - r as f64))
            .collect();
        let rank_of =
            |m: &BTreeMap<String, f64>, a: &str| ranking(m).iter().position(|x| x == a).unwrap() as i64;
        let mut s = 0i64;
        for i in 0..4 {
            for j in i + 1..4 {
                let (x, y) = (items[i], items[j]);
                s += (rank_of(&full, x) - rank_of(&full, y)).signum()
                    * (rank_of(&sub, x) - rank_of(&sub, y)).signum();
            }
        }
        let tau = s as f64 / 6.0;
        for k in 1..=4 {
            let got = ranking_metrics(&full, &sub, k).unwrap();
            let top_full: Vec<&str> = items[..k].to_vec();
            let top_sub: Vec<&str> = p[..k].iter().map(|&i| items[i]).collect();
            let inter = top_full.iter().filter(|a| top_sub.contains(a)).count();
            let union = 2 * k - inter;
            let want_j = inter as f64 / union as f64;
            if got.jaccard != want_j || got.jaccard != jaccard(&top_full, &top_sub) {
                mismatches += 1;
            }
            if k == 4 && got.kendall_tau != tau {
                mismatches += 1;
            }
        }
    }
    verdict(
        9,
        "ranking metrics",
        all.len() == 24 && mismatches == 0,
        &format!("{} permutations x k in 1..=4, {mismatches} mismatches", all.len()),
    );
}

#[test]
fn c10_inference_cost() {
    let (c, dir) = smoke_run();
    let cells: Vec<SelectionCell> =
        serde_json::from_slice(&std::fs::read(dir.join("selections").join("index.json")).unwrap()).unwrap();
    let ok = |m: &str| -> Vec<&SelectionCell> {
        cells
            .iter()
            .filter(|s| s.method == m && s.status == CellStatus::Ok)
            .collect()
    };
    let (ind, tra, el2n, grand) = (ok("inductive"), ok("transductive"), ok("el2n"), ok("grand"));
    let n_archs = c.zoo.test_archs;
    let counts_complete = [&ind, &tra, &el2n, &grand].iter().all(|v| v.len() == n_archs);
    let ind_zero = ind
        .iter()
        .all(|s| s.model_grad_evals == 0 && s.surrogate_grad_evals == 0);
    let tra_steps = tra
        .iter()
        .all(|s| s.surrogate_grad_evals == c.transductive.steps as u64 && s.model_grad_evals == 0);
    let warmup_min = el2n
        .iter()
        .chain(&grand)
        .map(|s| s.model_grad_evals)
        .min()
        .unwrap_or(0);
    let fewer = warmup_min > 0;

    // The same contract measured on direct calls, counting every tag.
    let p = Pipeline::new(c.clone(), dir, c.seeds[0], 1).unwrap();
    let data = p.load_data().unwrap();
    let space = p.load_space().unwrap();
    let split = p.load_split().unwrap();
    let enc = p.load_encoder().unwrap();
    let approx = p.load_approximator(c.approximator.variant).unwrap();
    let train = data.train_indices();
    let (x, y) = (data.feature_matrix(&train), data.labels_of(&train));
    let b = fraction_count(0.1, train.len());
    let scorer = p.load_scorer(c.approximator.variant, b).unwrap();
    let id = &split.test_archs[0];
    let emb = enc.encode(&space[id]).unwrap();
    let view = InstanceView::compute(&approx, &ordered_embedding(&emb, &space[id]).unwrap(), &x, &y).unwrap();
    let pooled = vec![0.0; emb.h.cols()];
    let total = || [GradTag::ModelTraining, GradTag::Surrogate, GradTag::Auxiliary].map(grad_evaluations);
    let before = total();
    inductive_select(&scorer, id, &pooled, &view, &x, &y, b, 0).unwrap();
    let direct_ind = total() == before;
    let before = total();
    let t = transductive_select(id, &view, b, 0, &c.transductive).unwrap();
    let after = total();
    let direct_tra = after[1] - before[1] == c.transductive.steps as u64
        && after[0] == before[0]
        && t.grad_evals == c.transductive.steps as u64;

    verdict(
        10,
        "inference-cost contract",
        counts_complete && ind_zero && tra_steps && fewer && direct_ind && direct_tra,
        &format!(
            "inductive 0 evals {ind_zero}/{direct_ind}, transductive = {} steps {tra_steps}/{direct_tra}, \
             min EL2N/GraNd warmup model evals {warmup_min} vs 0",
            c.transductive.steps
        ),
    );
}
