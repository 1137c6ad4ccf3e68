//! Exponential weight averaging.

/// `ξ ← τ·ξ + (1−τ)·θ`.
pub fn ewa_update(xi: &mut [f64], theta: &[f64], tau: f64) {
    debug_assert_eq!(xi.len(), theta.len());
    for (x, t) in xi.iter_mut().zip(theta) {
        *x = tau * *x + (1.0 - tau) * t;
    }
}
