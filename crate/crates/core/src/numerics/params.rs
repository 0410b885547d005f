use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of parameters belonging to one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    has_grad: bool,
}

/// Tape handles for every parameter of a set, in set order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        width: usize,
        value: f64,
    ) -> Result<ParamId, NumericsError> {
        self.add(name, Tensor::full(1, width, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Copies adjoints into `grad`; parameters off the loss path get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.grad.data_mut().fill(0.0),
            }
        }
        self.has_grad = true;
    }

    /// Declares hand-filled `grad` tensors valid for an optimizer step.
    pub fn mark_grads_ready(&mut self) {
        self.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            ps.add("a", Tensor::scalar(2.0)),
            Err(NumericsError::DuplicateParam(_))
        ));
    }

    #[test]
    fn off_path_params_get_zero_grad() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::row(&[1.0, 2.0])).unwrap();
        let b = ps.add("b", Tensor::row(&[5.0])).unwrap();
        ps.get_mut(b).grad = Tensor::row(&[9.0]);
        let mut t = Tape::new();
        let bound = ps.bind(&mut t);
        let loss = t.sum(bound.get(a));
        let g = t.backward(loss).unwrap();
        ps.store_grads(&bound, &g);
        assert_eq!(ps.get(a).grad.data(), &[1.0, 1.0]);
        assert_eq!(ps.get(b).grad.data(), &[0.0]);
    }
}
