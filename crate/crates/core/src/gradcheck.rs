//! Central finite-difference oracles for validating analytic gradients.
//!
//! Test-support module: nothing here is used by the forward or backward
//! paths it checks.

use crate::numeric::{ParamId, ParameterSet};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a guarded denominator so near-zero derivative pairs
/// compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central difference of `f` w.r.t. each entry of `x`.
pub fn central_diff_vec<F>(x: &mut [f64], mut f: F, step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + step;
        let plus = f(x);
        x[i] = saved - step;
        let minus = f(x);
        x[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central difference of `f` w.r.t. every scalar of the listed parameters.
///
/// Returns, per parameter, the numeric gradient in row-major layout.
#[allow(clippy::needless_range_loop)]
pub fn central_diff_params<F>(
    ps: &mut ParameterSet,
    ids: &[ParamId],
    mut f: F,
    step: f64,
) -> Vec<Vec<f64>>
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = ps.value(id).data().len();
        let mut grad = vec![0.0; len];
        for i in 0..len {
            let saved = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = saved + step;
            let plus = f(ps);
            ps.value_mut(id).data_mut()[i] = saved - step;
            let minus = f(ps);
            ps.value_mut(id).data_mut()[i] = saved;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Compare analytic parameter gradients (already accumulated in `ps`)
/// against the finite-difference oracle. Returns the worst relative error
/// together with the name of the parameter it occurred in.
pub fn check_param_grads<F>(
    ps: &mut ParameterSet,
    ids: &[ParamId],
    f: F,
    step: f64,
) -> (f64, String)
where
    F: FnMut(&ParameterSet) -> f64,
{
    let numeric = central_diff_params(ps, ids, f, step);
    let mut worst = (0.0, String::new());
    for (&id, num) in ids.iter().zip(numeric.iter()) {
        let err = max_rel_err(ps.grad(id).data(), num);
        if err >= worst.0 {
            worst = (err, ps.name(id).to_string());
        }
    }
    worst
}
