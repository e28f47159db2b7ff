//! Central finite-difference verification of reverse-mode gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so gradients that are zero in
/// both routes do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, element index) where the max relative error occurs.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, perturbing every scalar parameter of `store` by `step`.
///
/// `f` must record a deterministic scalar on the evaluation tape it is given.
pub fn grad_check<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let analytic = tape.param_grads(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        Ok(t.value(v).item())
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (pi, id) in store.ids().enumerate() {
        for e in 0..store.get(id).numel() {
            let orig = store.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[e];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
