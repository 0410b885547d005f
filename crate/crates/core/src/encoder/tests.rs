use proptest::prelude::*;

use super::*;
use crate::archspace::{generate_space, Constraints, OpCode::*};
use crate::layers::LN_EPS;
use crate::numerics::gradcheck::check_gradients;

fn small() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        width: 3,
        hidden: 4,
        latent: 2,
        ..EncoderConfig::default()
    }
}

fn val<'a>(enc: &'a GraphEncoder, name: &str) -> &'a Tensor {
    &enc.params.by_name(name).unwrap().value
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>())
        .collect()
}

fn norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, a)| (a - m) / (v + LN_EPS).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|a| a.max(0.0)).collect()
}

fn mlp(enc: &GraphEncoder, name: &str, x: &[f64]) -> Vec<f64> {
    let h = dense(
        x,
        val(enc, &format!("{name}/inner/w")),
        val(enc, &format!("{name}/inner/b")),
    );
    let h = relu(norm(
        &h,
        val(enc, &format!("{name}/norm/gain")),
        val(enc, &format!("{name}/norm/bias")),
    ));
    dense(
        &h,
        val(enc, &format!("{name}/outer/w")),
        val(enc, &format!("{name}/outer/b")),
    )
}

fn init(enc: &GraphEncoder, op: OpCode) -> Vec<f64> {
    let mut f = vec![0.0; 5];
    f[op.ordinal()] = 1.0;
    let h = relu(dense(&f, val(enc, "init/a/w"), val(enc, "init/a/b")));
    dense(&h, val(enc, "init/b/w"), val(enc, "init/b/b"))
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

#[test]
fn two_node_graph_matches_hand_unrolled_layer() {
    let mut enc = GraphEncoder::new(small(), 3).unwrap();
    // Non-trivial norm affine so the oracle exercises it.
    for p in enc.params.iter_mut() {
        if p.name.ends_with("norm/gain") {
            p.value = Tensor::row(&[0.5, 1.5, -1.0, 2.0]);
        }
    }
    let a = Architecture::new(vec![Input, Output], vec![(0, 1)]);
    let h = enc.encode(&a).unwrap().h;
    assert_eq!(h.shape(), &[2, 6]);
    let h0 = [init(&enc, Input), init(&enc, Output)];
    for u in 0..2 {
        let v = 1 - u;
        let msg = mlp(&enc, "layer0/edge", &cat(&h0[u], &h0[v]));
        let h1 = mlp(&enc, "layer0/update", &cat(&h0[u], &msg));
        let expect = cat(&h0[u], &h1);
        for (got, want) in h.row_slice(u).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn depth_one_is_init_only() {
    let cfg = EncoderConfig { depth: 1, ..small() };
    let enc = GraphEncoder::new(cfg, 1).unwrap();
    let a = Architecture::new(vec![Input, OpB, Output], vec![(0, 1), (1, 2)]);
    let h = enc.encode(&a).unwrap().h;
    assert_eq!(h.shape(), &[3, 3]);
    for (u, op) in a.nodes.iter().enumerate() {
        assert_eq!(h.row_slice(u), init(&enc, *op).as_slice());
    }
}

#[test]
fn default_width_is_concatenated_stages() {
    let enc = GraphEncoder::new(EncoderConfig::default(), 0).unwrap();
    let a = Architecture::new(vec![Input, OpA, Output], vec![(0, 1), (1, 2)]);
    assert_eq!(enc.encode(&a).unwrap().h.shape(), &[3, 80]);
}

#[test]
fn elbo_signs_and_prior_match() {
    let mut enc = GraphEncoder::new(small(), 2).unwrap();
    for a in generate_space(5, 10, &Constraints::default()).unwrap() {
        let parts = enc.elbo(&a, 9).unwrap();
        assert!(parts.kl >= 0.0);
        assert!(parts.reconstruction <= 0.0);
    }
    enc.zero_heads();
    let a = Architecture::new(vec![Input, OpC, Output], vec![(0, 1), (1, 2), (0, 2)]);
    assert_eq!(enc.elbo(&a, 4).unwrap().kl, 0.0);
}

#[test]
fn elbo_gradient_check() {
    let enc = GraphEncoder::new(small(), 8).unwrap();
    let a = Architecture::new(vec![Input, OpA, Output], vec![(0, 1), (1, 2), (0, 2)]);
    let batch = GraphBatch::new(&[&a]);
    let noise = enc.noise(3, 1);
    let report = check_gradients(
        &enc.params,
        |tape, bound| {
            let (rec, kl) = enc.elbo_vars(tape, bound, &batch, noise.clone());
            tape.sub(rec, kl)
        },
        1e-5,
        1,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn encode_is_deterministic_and_rejects_invalid() {
    let enc = GraphEncoder::new(small(), 2).unwrap();
    let a = Architecture::new(vec![Input, OpA, Output], vec![(0, 1), (1, 2)]);
    assert_eq!(enc.encode(&a).unwrap(), enc.encode(&a).unwrap());
    let bad = Architecture::new(vec![Input, OpA, Output], vec![(0, 2)]);
    assert!(enc.encode(&bad).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let enc = GraphEncoder::new(small(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    enc.save(dir.path()).unwrap();
    let back = GraphEncoder::load(dir.path()).unwrap();
    let a = Architecture::new(vec![Input, OpB, Output], vec![(0, 1), (1, 2), (0, 2)]);
    let mut rounded = enc.clone();
    rounded.params.round_to_f32();
    assert_eq!(back.encode(&a).unwrap(), rounded.encode(&a).unwrap());
}

#[test]
fn zero_dims_rejected() {
    assert!(GraphEncoder::new(EncoderConfig { depth: 0, ..small() }, 0).is_err());
}

#[test]
fn training_raises_elbo_and_recovers_edges() {
    let space = generate_space(11, 120, &Constraints::default()).unwrap();
    let (train, held) = space.split_at(100);
    let cfg = EncoderConfig {
        batch_size: 16,
        ..EncoderConfig::default()
    };
    let (enc, report) = train_encoder(train, &cfg, 3).unwrap();
    assert_eq!(report.curve.len(), cfg.epochs + 1);
    assert!(
        report.curve.last().unwrap() > &report.curve[0],
        "{:?}",
        report.curve
    );
    let auc = edge_auc(&enc, held).unwrap();
    assert!(auc > 0.5, "auc {auc}");
}

#[test]
fn training_needs_a_full_batch() {
    let space = generate_space(1, 4, &Constraints::default()).unwrap();
    assert!(train_encoder(&space, &EncoderConfig::default(), 0).is_err());
}

/// Permutations that keep the input first and the output last.
fn interior_perm(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mid: Vec<usize> = (1..n - 1).collect();
    mid.shuffle(&mut rng);
    let mut p = vec![0];
    p.extend(mid);
    p.push(n - 1);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn encode_is_permutation_equivariant(space_seed in 0u64..1000, perm_seed in 0u64..1000) {
        let enc = GraphEncoder::new(small(), 4).unwrap();
        let a = &generate_space(space_seed, 1, &Constraints::default()).unwrap()[0];
        let perm = interior_perm(a.num_nodes(), perm_seed);
        let b = a.permute_nodes(&perm);
        let ha = enc.encode(a).unwrap().h;
        let hb = enc.encode(&b).unwrap().h;
        for u in 0..a.num_nodes() {
            prop_assert_eq!(ha.row_slice(u), hb.row_slice(perm[u]));
        }
    }
}
