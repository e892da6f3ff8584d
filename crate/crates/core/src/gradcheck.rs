//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Bound, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Denominator floor for the relative error so that near-zero gradients are
/// compared on an absolute scale. It sits above the roundoff of a central
/// difference at h = 1e-5 on an O(1) loss (about 1e-10).
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against `(f(p+h) - f(p-h)) / 2h` for
/// every scalar in `params`. `loss_fn` must be deterministic.
pub fn check_gradients<F>(params: &ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let loss = loss_fn(&tape, &bound);
    let analytic = tape.grad(loss)?;

    let eval = |p: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bound = tape.bind(p, "");
        loss_fn(&tape, &bound).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grads[&name].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
