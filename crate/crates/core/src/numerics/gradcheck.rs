//! Central finite-difference check of tape gradients.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::NumericsError;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` for the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `loss` against `(f(x+h) - f(x-h)) / 2h`
/// for every entry (or every `stride`-th entry) of every parameter.
pub fn check_gradients<F>(
    params: &ParamSet,
    loss: F,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound);
    let grads = tape.backward(out)?;

    let eval = |ps: &ParamSet| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let b = ps.bind_frozen(&mut t);
        let v = loss(&mut t, &b);
        t.check()?;
        Ok(t.scalar(v))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = params.iter().map(|p| params.id(&p.name).unwrap()).collect();
    for (id, &var) in ids.into_iter().zip(bound.vars()) {
        let n = params.get(id).value.len();
        let analytic = grads.get(var).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; n]);
        for k in (0..n).step_by(stride.max(1)) {
            let orig = work.get(id).value.data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[k], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((params.get(id).name.clone(), k, analytic[k], numeric));
            }
        }
    }
    Ok(report)
}
