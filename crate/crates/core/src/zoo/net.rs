use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ZooError;
use crate::archspace::{Architecture, OpCode};
use crate::numerics::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub d_x: usize,
    pub d_hidden: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Trainable network built from an [`Architecture`].
///
/// The input node is a dense stem `d_x -> d_hidden`. Node `v` sums
/// `Op_v(a(u))` over its in-neighbours `u`: `OpA` is dense + ReLU, `OpB` is
/// dense linear, `OpC` is a width-3 max pool. The output node sums its
/// in-neighbours and applies a dense head `d_hidden -> classes`.
#[derive(Clone, Debug)]
pub struct MaterializedNet {
    pub source: String,
    pub arch: Architecture,
    pub dims: NetDims,
    pub params: ParamSet,
    topo: Vec<usize>,
    in_nbrs: Vec<Vec<usize>>,
    stem: Dense,
    head: Dense,
    nodes: Vec<Option<Dense>>,
}

/// Parameter count implied by an architecture's op multiset.
pub fn expected_param_count(arch: &Architecture, dims: NetDims) -> usize {
    let h = dims.d_hidden;
    let dense_nodes = arch
        .nodes
        .iter()
        .filter(|op| matches!(op, OpCode::OpA | OpCode::OpB))
        .count();
    dims.d_x * h + h + dense_nodes * (h * h + h) + h * dims.classes + dims.classes
}

impl MaterializedNet {
    pub fn materialize(arch: &Architecture, dims: NetDims, seed: u64) -> Result<Self, ZooError> {
        if dims.d_x == 0 || dims.d_hidden == 0 || dims.classes == 0 {
            return Err(ZooError::Config(format!("non-positive dims {dims:?}")));
        }
        let topo = arch.topological_order()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = dims.d_hidden;
        let mut dense = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize| {
            Ok::<_, ZooError>(Dense {
                w: params.add_weight(format!("{name}/w"), fan_in, fan_out, &mut rng)?,
                b: params.add_filled(format!("{name}/b"), fan_out, 0.0)?,
            })
        };
        let stem = dense(&mut params, "stem", dims.d_x, h)?;
        let mut nodes = vec![None; arch.num_nodes()];
        for (v, op) in arch.nodes.iter().enumerate() {
            if matches!(op, OpCode::OpA | OpCode::OpB) {
                nodes[v] = Some(dense(&mut params, &format!("node{v}"), h, h)?);
            }
        }
        let head = dense(&mut params, "head", h, dims.classes)?;
        let in_nbrs = (0..arch.num_nodes()).map(|v| arch.in_neighbors(v)).collect();
        Ok(Self {
            source: arch.id.clone(),
            arch: arch.clone(),
            dims,
            params,
            topo,
            in_nbrs,
            stem,
            head,
            nodes,
        })
    }

    /// Rebuilds the net around previously trained parameters.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self, ZooError> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(self.params.iter())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(ZooError::Config(format!(
                "checkpoint does not match architecture {}",
                self.source
            )));
        }
        self.params = params;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Returns `(logits, penultimate)`; the penultimate activation is the
    /// summed input of the output node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> (Var, Var) {
        let n = self.arch.num_nodes();
        let mut act: Vec<Option<Var>> = vec![None; n];
        let out_node = n - 1;
        let mut penultimate = None;
        for &v in &self.topo {
            let a = if v == 0 {
                tape.linear(x, bound.get(self.stem.w), Some(bound.get(self.stem.b)))
            } else {
                let inputs: Vec<Var> = self.in_nbrs[v].iter().map(|&u| act[u].unwrap()).collect();
                match self.arch.nodes[v] {
                    OpCode::OpA | OpCode::OpB => {
                        let d = self.nodes[v].unwrap();
                        let transformed: Vec<Var> = inputs
                            .iter()
                            .map(|&a| tape.linear(a, bound.get(d.w), Some(bound.get(d.b))))
                            .collect();
                        let s = sum_vars(tape, &transformed);
                        if self.arch.nodes[v] == OpCode::OpA {
                            tape.relu(s)
                        } else {
                            s
                        }
                    }
                    OpCode::OpC => {
                        let pooled: Vec<Var> = inputs.iter().map(|&a| tape.max_pool3(a)).collect();
                        sum_vars(tape, &pooled)
                    }
                    OpCode::Output => {
                        let s = sum_vars(tape, &inputs);
                        penultimate = Some(s);
                        tape.linear(s, bound.get(self.head.w), Some(bound.get(self.head.b)))
                    }
                    OpCode::Input => unreachable!("validated architecture has one input"),
                }
            };
            act[v] = Some(a);
        }
        (act[out_node].unwrap(), penultimate.unwrap())
    }

    /// Softmax outputs for a feature matrix, without recording gradients.
    pub fn predict_proba(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(features.clone());
        let (logits, _) = self.forward(&mut tape, &bound, x);
        let p = tape.softmax_rows(logits);
        tape.value(p).clone()
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.w
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{generate_space, Constraints};
    use OpCode::*;

    const DIMS: NetDims = NetDims {
        d_x: 5,
        d_hidden: 6,
        classes: 3,
    };

    #[test]
    fn chain_is_logistic_regression_shaped() {
        let a = Architecture::new(vec![Input, Output], vec![(0, 1)]);
        let net = MaterializedNet::materialize(&a, DIMS, 0).unwrap();
        assert_eq!(net.param_count(), 5 * 6 + 6 + 6 * 3 + 3);
    }

    #[test]
    fn param_counts_match_formula() {
        for a in generate_space(4, 40, &Constraints::default()).unwrap() {
            let net = MaterializedNet::materialize(&a, DIMS, 1).unwrap();
            assert_eq!(net.param_count(), expected_param_count(&a, DIMS));
        }
    }

    #[test]
    fn forward_shape_on_batch() {
        let a = Architecture::new(
            vec![Input, OpA, OpC, OpB, Output],
            vec![(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (0, 4)],
        );
        let net = MaterializedNet::materialize(&a, DIMS, 2).unwrap();
        let x = Tensor::matrix(4, 5, (0..20).map(|v| v as f64 * 0.1).collect()).unwrap();
        let p = net.predict_proba(&x);
        assert_eq!(p.shape(), &[4, 3]);
        for r in 0..4 {
            assert!((p.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_node_matches_loop_oracle() {
        // Input -> OpC -> Output: the head sees maxpool(stem(x)).
        let a = Architecture::new(vec![Input, OpC, Output], vec![(0, 1), (1, 2)]);
        let net = MaterializedNet::materialize(&a, DIMS, 3).unwrap();
        let x = Tensor::matrix(2, 5, vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0, 1.0, -2.0, 0.1, 0.7]).unwrap();
        let stem = x.matmul(&net.params.by_name("stem/w").unwrap().value).unwrap();
        let mut tape = Tape::new();
        let bound = net.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, pen) = net.forward(&mut tape, &bound, xv);
        let got = tape.value(pen);
        for r in 0..2 {
            let row = stem.row_slice(r);
            for j in 0..6usize {
                let mut m = f64::NEG_INFINITY;
                for k in j.saturating_sub(1)..=(j + 1).min(5) {
                    m = m.max(row[k]);
                }
                assert_eq!(got.get(r, j), m);
            }
        }
    }

    #[test]
    fn rejects_zero_dims() {
        let a = Architecture::new(vec![Input, Output], vec![(0, 1)]);
        let dims = NetDims { d_hidden: 0, ..DIMS };
        assert!(MaterializedNet::materialize(&a, dims, 0).is_err());
    }
}
