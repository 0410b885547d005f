//! Small parameter bundles shared by the trainable modules.

use rand::Rng;

use crate::numerics::{Bound, NumericsError, ParamId, ParamSet, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            w: params.add_weight(format!("{name}/w"), fan_in, fan_out, rng)?,
            b: Some(params.add_filled(format!("{name}/b"), fan_out, 0.0)?),
        })
    }

    pub fn no_bias<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            w: params.add_weight(format!("{name}/w"), fan_in, fan_out, rng)?,
            b: None,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.linear(x, bound.get(self.w), self.b.map(|b| bound.get(b)))
    }
}

/// Row-wise layer normalization with a learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: params.add_filled(format!("{name}/gain"), width, 1.0)?,
            bias: params.add_filled(format!("{name}/bias"), width, 0.0)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.mul_row(n, bound.get(self.gain));
        tape.add_row(g, bound.get(self.bias))
    }
}

/// Copies parameter values from `src` into a freshly built set with the
/// same names and shapes.
pub fn adopt_params(target: &mut ParamSet, src: ParamSet, what: &str) -> Result<(), NumericsError> {
    if src.len() != target.len()
        || src
            .iter()
            .zip(target.iter())
            .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
    {
        return Err(NumericsError::Checkpoint(format!(
            "{what} checkpoint does not match the configured shapes"
        )));
    }
    *target = src;
    Ok(())
}
