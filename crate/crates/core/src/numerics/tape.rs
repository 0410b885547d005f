//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints for every node that
//! depends on a trainable leaf.
//!
//! Non-finite forward values poison the tape: the first offending op is
//! remembered and reported by [`Tape::check`] and [`Tape::backward`].

use std::cell::Cell;

use rand::Rng;

use super::tensor::{matmul_into, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward pass is being spent on. Counted per thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTag {
    /// Training the weights of a materialized network.
    ModelTraining,
    /// Gradient of the subset-selection surrogate with respect to scores.
    Surrogate,
    /// Everything else (encoder, approximator, scoring network).
    Auxiliary,
}

thread_local! {
    static GRAD_COUNTS: [Cell<u64>; 3] = const { [Cell::new(0), Cell::new(0), Cell::new(0)] };
}

fn tag_slot(tag: GradTag) -> usize {
    match tag {
        GradTag::ModelTraining => 0,
        GradTag::Surrogate => 1,
        GradTag::Auxiliary => 2,
    }
}

/// Number of backward passes with `tag` run on the current thread.
pub fn grad_evaluations(tag: GradTag) -> u64 {
    GRAD_COUNTS.with(|c| c[tag_slot(tag)].get())
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Ln(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    MaxPool3(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SegmentSum(Var, Vec<Vec<usize>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Ln(..) => "ln",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
            Op::MaxPool3(..) => "max_pool3",
            Op::Pick(..) => "pick",
            Op::SegmentSum(..) => "segment_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
    tag: GradTag,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_tag(GradTag::Auxiliary)
    }

    pub fn with_tag(tag: GradTag) -> Self {
        Self {
            nodes: Vec::with_capacity(64),
            fault: None,
            tag,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn check(&self) -> Result<(), NumericsError> {
        match self.fault {
            Some(op) => Err(NumericsError::NonFinite { op, phase: "forward" }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul {}x{} by {}x{}", n, k, bv.rows(), m);
        let mut out = vec![0.0; n * m];
        matmul_into(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::MatMul(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "{} shape mismatch", op.name());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, r: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        let c = av.cols();
        assert_eq!(rv.len(), c, "{} width mismatch", op.name());
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rv.data()[i % c]))
            .collect();
        let t = Tensor::matrix(av.rows(), c, data).unwrap();
        let rg = self.rg(a) || self.rg(r);
        self.push(t, op, rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, Op::AddRow(a, r), |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        self.row_broadcast(a, r, Op::MulRow(a, r), |x, y| x * y)
    }

    /// Elementwise product with a fixed mask.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), mask.shape(), "mul_const shape mismatch");
        let data = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, mask), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Multiplies `a` by the single entry of the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let t = self.nodes[a.0].value.map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(t, Op::MulScalarVar(a, s), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `ln(max(x, floor))`; entries below the floor get zero gradient.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::Ln(a, floor), |x| x.max(floor).ln())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization to mean 0, variance 1 (biased variance).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::LayerNormRows(a, inv_std), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(a);
        self.push(Tensor::row(&out), Op::SumRows(a), rg)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let out: Vec<f64> = av.data().chunks(c).map(|r| r.iter().sum()).collect();
        let t = Tensor::matrix(av.rows(), 1, out).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::SumCols(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let t = self.nodes[a.0].value.gather_rows(idx);
        let rg = self.rg(a);
        self.push(t, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, total, data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, cols, data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Sliding-window max along each row, window 3, stride 1, same padding.
    pub fn max_pool3(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = Vec::with_capacity(av.len());
        let mut arg = Vec::with_capacity(av.len());
        for (r, row) in av.data().chunks(c).enumerate() {
            for j in 0..c {
                let lo = j.saturating_sub(1);
                let hi = (j + 1).min(c - 1);
                let mut best = lo;
                for k in lo + 1..=hi {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                data.push(row[best]);
                arg.push(r * c + best);
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::MaxPool3(a, arg), rg)
    }

    /// Picks column `cols[r]` from each row `r`: `r x c -> r x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows(), cols.len(), "pick needs one column per row");
        let data: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let t = Tensor::matrix(cols.len(), 1, data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Pick(a, cols.to_vec()), rg)
    }

    /// Output row `g` is the sum of input rows listed in `groups[g]`.
    ///
    /// Rows within a group are summed in lexicographic order of their
    /// values, so the result does not depend on how a group is listed.
    pub fn segment_sum(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            let mut rows: Vec<&[f64]> = members.iter().map(|&i| av.row_slice(i)).collect();
            rows.sort_by(|x, y| {
                x.iter()
                    .zip(y.iter())
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let out = &mut data[g * c..(g + 1) * c];
            for row in rows {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        let t = Tensor::matrix(groups.len(), c, data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::SegmentSum(a, groups.to_vec()), rg)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, Tensor::new(shape, mask).unwrap())
    }

    /// Dense layer `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let h = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(h, b),
            None => h,
        }
    }

    /// Runs the backward pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        self.check()?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        GRAD_COUNTS.with(|c| {
            let slot = &c[tag_slot(self.tag)];
            slot.set(slot.get() + 1);
        });
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_in_place(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros_like(&self.nodes[v.0].value));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |x: &Tensor, f: &dyn Fn(usize) -> f64| {
            let data = g.data().iter().enumerate().map(|(k, gv)| gv * f(k)).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * k];
                    let bt = bv.transpose();
                    matmul_into(g.data(), bt.data(), &mut ga, n, m, k);
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * m];
                    let at = av.transpose();
                    matmul_into(at.data(), g.data(), &mut gb, k, n, m);
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = elementwise(av, &|k| bv.data()[k]);
                let gb = elementwise(bv, &|k| av.data()[k]);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                let c = g.cols();
                self.acc_with(grads, *r, |t| {
                    for row in g.data().chunks(c) {
                        t.data_mut().iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                let c = av.cols();
                let ga = elementwise(av, &|k| rv.data()[k % c]);
                self.acc(grads, *a, ga);
                self.acc_with(grads, *r, |t| {
                    for (k, (gv, xv)) in g.data().iter().zip(av.data()).enumerate() {
                        t.data_mut()[k % c] += gv * xv;
                    }
                });
            }
            Op::MulConst(a, mask) => {
                self.acc(grads, *a, elementwise(val(*a), &|k| mask.data()[k]));
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalarVar(a, s) => {
                let sv = val(*s).item();
                self.acc(grads, *a, g.map(|x| x * sv));
                let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                self.acc(
                    grads,
                    *s,
                    Tensor::new(val(*s).shape().to_vec(), vec![dot]).unwrap(),
                );
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = elementwise(av, &|k| if av.data()[k] > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                let ga = elementwise(av, &|k| if av.data()[k] > 0.0 { 1.0 } else { *slope });
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = elementwise(out, &|k| {
                    let s = out.data()[k];
                    s * (1.0 - s)
                });
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = elementwise(out, &|k| 1.0 - out.data()[k] * out.data()[k]);
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => self.acc(grads, *a, elementwise(out, &|k| out.data()[k])),
            Op::Softplus(a) => {
                let av = val(*a);
                self.acc(grads, *a, elementwise(av, &|k| sigmoid(av.data()[k])));
            }
            Op::Ln(a, floor) => {
                let av = val(*a);
                let ga = elementwise(av, &|k| {
                    let x = av.data()[k];
                    if x >= *floor {
                        1.0 / x
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (srow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    ga.extend(srow.iter().zip(grow).map(|(s, gv)| s * (gv - dot)));
                }
                self.acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (lrow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    ga.extend(lrow.iter().zip(grow).map(|(l, gv)| gv - l.exp() * gsum));
                }
                self.acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
            }
            Op::LayerNormRows(a, inv_std) => {
                let c = out.cols();
                let cf = c as f64;
                let mut ga = Vec::with_capacity(out.len());
                for (r, (yrow, grow)) in out.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let gmean = grow.iter().sum::<f64>() / cf;
                    let gy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / cf;
                    ga.extend(
                        yrow.iter()
                            .zip(grow)
                            .map(|(y, gv)| inv_std[r] * (gv - gmean - y * gy)),
                    );
                }
                self.acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.acc(grads, *a, val(*a).map(|_| gv));
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let c = av.cols();
                self.acc(grads, *a, elementwise_shape(av, |k| g.data()[k % c]));
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let c = av.cols();
                self.acc(grads, *a, elementwise_shape(av, |k| g.data()[k / c]));
            }
            Op::GatherRows(a, idx) => {
                let c = g.cols();
                self.acc_with(grads, *a, |t| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut t.data_mut()[src * c..(src + 1) * c];
                        dst.iter_mut().zip(g.row_slice(r)).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.acc(grads, *p, Tensor::new(val(*p).shape().to_vec(), data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if self.rg(*p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, *p, Tensor::new(val(*p).shape().to_vec(), data).unwrap());
                    }
                    offset += n;
                    debug_assert_eq!(n % c, 0);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::MaxPool3(a, arg) => {
                self.acc_with(grads, *a, |t| {
                    for (k, &src) in arg.iter().enumerate() {
                        t.data_mut()[src] += g.data()[k];
                    }
                });
            }
            Op::Pick(a, cols) => {
                let c = val(*a).cols();
                self.acc_with(grads, *a, |t| {
                    for (r, &col) in cols.iter().enumerate() {
                        t.data_mut()[r * c + col] += g.data()[r];
                    }
                });
            }
            Op::SegmentSum(a, groups) => {
                let c = g.cols();
                self.acc_with(grads, *a, |t| {
                    for (gi, members) in groups.iter().enumerate() {
                        for &m in members {
                            let dst = &mut t.data_mut()[m * c..(m + 1) * c];
                            dst.iter_mut().zip(g.row_slice(gi)).for_each(|(o, v)| *o += v);
                        }
                    }
                });
            }
        }
    }
}

fn elementwise_shape(like: &Tensor, f: impl Fn(usize) -> f64) -> Tensor {
    Tensor::new(like.shape().to_vec(), (0..like.len()).map(f).collect()).unwrap()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(&[1.0, 2.0]));
        let sq = t.mul(w, w);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_no_gradient_path() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(&[1.0, 2.0]));
        let c = t.constant(Tensor::row(&[3.0, 4.0]));
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(&[1000.0]));
        let e = t.exp(w);
        let z = t.sub(e, e);
        let loss = t.sum(z);
        match t.backward(loss) {
            Err(NumericsError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn max_pool_matches_loop() {
        let x = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0];
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(&x));
        let p = t.max_pool3(v);
        let mut expected = Vec::new();
        for j in 0..x.len() {
            let mut m = f64::NEG_INFINITY;
            for k in j.saturating_sub(1)..=(j + 1).min(x.len() - 1) {
                m = m.max(x[k]);
            }
            expected.push(m);
        }
        assert_eq!(t.value(p).data(), expected.as_slice());
    }

    #[test]
    fn segment_sum_is_order_free() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::matrix(3, 1, vec![0.1, 1e16, -1e16]).unwrap());
        let a = t.segment_sum(v, &[vec![0, 1, 2]]);
        let b = t.segment_sum(v, &[vec![2, 0, 1]]);
        assert_eq!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn backward_counts_by_tag() {
        let before = grad_evaluations(GradTag::Surrogate);
        let mut t = Tape::with_tag(GradTag::Surrogate);
        let w = t.param(Tensor::scalar(1.0));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(grad_evaluations(GradTag::Surrogate), before + 1);
    }
}
