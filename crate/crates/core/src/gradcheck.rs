//! Central finite-difference gradient verification.

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// `f` returns `(loss, gradient)`. The result is the largest relative error
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient length must match parameter count"
    );
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x).0;
        x[i] = orig - step;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
