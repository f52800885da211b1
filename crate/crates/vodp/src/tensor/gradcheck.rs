//! Central-difference gradient verification.

use super::scalar::Scalar;

/// Result of checking one tensor's analytic gradient against central
/// differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` (the gradient produced by the tape for `x`) against
/// central differences of `f` evaluated coordinate by coordinate:
/// `(f(x + h·e) − f(x − h·e)) / 2h`.
///
/// Returns the max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
/// `f` must be deterministic; run this at 64-bit precision.
pub fn finite_diff_check<S, F>(f: F, x: &[S], analytic: &[S], h: f64) -> GradCheck
where
    S: Scalar,
    F: Fn(&[S]) -> S,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let hs = S::from_f64(h);
    let mut probe = x.to_vec();
    let mut max_rel_err = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + hs;
        let fp = f(&probe).to_f64();
        probe[i] = x[i] - hs;
        let fm = f(&probe).to_f64();
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i].to_f64() - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    GradCheck { max_rel_err, coords_checked: x.len() }
}
