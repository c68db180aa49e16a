//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Compare the tape gradient of `f` against central finite differences over
/// every parameter in `store`. `f` must deterministically build the same
/// scalar function of the tracked parameters each time it is called.
///
/// Returns `max_i |ad_i - fd_i| / max(1, |fd_i|)`.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Var,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let ad = {
        let mut tape = Tape::new(store.flat(), &[]);
        let root = f(&mut tape);
        if !tape.value(root).is_finite() {
            return Err(Error::Numeric("objective is non-finite at the base point".into()));
        }
        tape.backward(root)?
    };

    let mut work = store.flat().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let fp = eval(&f, &work)?;
        work[i] = orig - step;
        let fm = eval(&f, &work)?;
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (ad[i] - fd).abs() / fd.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval<F>(f: &F, params: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(params, &[]);
    let root = f(&mut tape);
    let v = tape.value(root);
    if !v.is_finite() {
        return Err(Error::Numeric("objective is non-finite at a probe point".into()));
    }
    Ok(v)
}
