//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome for one named parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    /// Largest `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
    /// over the checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries sitting on a rectifier or clamp kink, where the two one-sided
    /// differences disagree and the analytic value matches one of them.
    pub excluded: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub value: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    let v = tape.value(root);
    if v.shape() != (1, 1) {
        return Err(Error::shape("grad_check", format!("root {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `eps` for every entry of the parameters in `ids`.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// mismatch is reported as an error.
pub fn grad_check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let root = f(&work, &mut tape)?;
    let f0 = tape.value(root).item();
    let grads = tape.backward(root)?;
    work.accumulate(&tape, &grads);
    drop(tape);

    let again = eval(&work, &f)?;
    if again.to_bits() != f0.to_bits() {
        return Err(Error::InvalidArgument(format!(
            "grad_check: function is not deterministic ({f0} vs {again})"
        )));
    }

    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = work.grad(id).clone();
        let mut check = ParamCheck {
            name: work.name(id).to_string(),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for k in 0..analytic.len() {
            let orig = work.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + eps;
            let fp = eval(&work, &f)?;
            work.value_mut(id).data_mut()[k] = orig - eps;
            let fm = eval(&work, &f)?;
            work.value_mut(id).data_mut()[k] = orig;

            let a = analytic.data()[k];
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_error(a, numeric);
            if err > tol {
                let right = (fp - f0) / eps;
                let left = (f0 - fm) / eps;
                let sides_disagree = rel_error(right, left) > 10.0 * tol;
                let matches_side = rel_error(a, right).min(rel_error(a, left)) <= tol.sqrt();
                if sides_disagree && matches_side {
                    check.excluded += 1;
                    continue;
                }
            }
            check.checked += 1;
            check.max_rel_error = check.max_rel_error.max(err);
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        eps,
        tol,
        value: f0,
        params,
    })
}
