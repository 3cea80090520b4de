//! Central-difference gradient verification against analytic tape gradients.

use crate::error::NumericsError;
use crate::params::{GradBuf, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_component: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub components_checked: usize,
}

/// Perturbs every component of every parameter by ±step and compares the
/// central difference `(f(θ+h) − f(θ−h)) / 2h` against the analytic gradient.
///
/// The relative error per component is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
/// `f` must be a pure function of the store. Errors when any probe of `f`
/// returns a non-finite value.
pub fn finite_difference_check<S, F>(
    store: &mut ParamStore<S>,
    analytic: &GradBuf<S>,
    mut f: F,
    step: f64,
) -> Result<FdReport, NumericsError>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> S,
{
    let h = lit::<S>(step);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_component: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        components_checked: 0,
    };
    for pid in 0..store.len() {
        let n = store.get(pid).len();
        for i in 0..n {
            let orig = store.get(pid).values()[i];
            store.get_mut(pid).values_mut()[i] = orig + h;
            let fp = f(store);
            store.get_mut(pid).values_mut()[i] = orig - h;
            let fm = f(store);
            store.get_mut(pid).values_mut()[i] = orig;
            let (fp, fm) = (to_f64(fp)?, to_f64(fm)?);
            let numeric = (fp - fm) / (2.0 * step);
            let g = analytic.get(pid)[i].to_f64().expect("analytic grad to f64");
            let denom = g.abs().max(numeric.abs()).max(1e-12);
            let rel = (g - numeric).abs() / denom;
            report.components_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(pid).to_string();
                report.worst_component = i;
                report.analytic_at_worst = g;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn to_f64<S: Scalar>(x: S) -> Result<f64, NumericsError> {
    let v = x.to_f64().expect("scalar to f64");
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { context: "finite difference probe".into() });
    }
    Ok(v)
}
