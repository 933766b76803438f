//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of [`crate::graph`]'s backward pass: it only
//! re-evaluates a closure at perturbed inputs, so it can serve as a
//! reference for verifying analytic gradients.

use crate::error::Result;
use crate::tensor::Real;

/// Central-difference gradient of `f` at `x`: (f(x+h) - f(x-h)) / 2h.
pub fn finite_difference_gradient<F>(mut f: F, x: &[Real], step: Real) -> Result<Vec<Real>>
where
    F: FnMut(&[Real]) -> Result<Real>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative disagreement between two gradient vectors.
///
/// The per-component denominator is floored so agreement on near-zero
/// entries is judged absolutely.
pub fn max_rel_error(analytic: &[Real], numeric: &[Real], floor: Real) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, Real::max)
}
