//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only evaluates forward passes, so it stays independent of the
//! backward implementation it is used to check.

/// Computes `d f / d inputs[which][idx]` by central differences.
///
/// `f` must build a fresh forward pass from the given inputs and return the
/// scalar loss value.
pub fn central_diff(
    f: &dyn Fn(&[Vec<f32>]) -> f32,
    inputs: &[Vec<f32>],
    which: usize,
    idx: usize,
    eps: f32,
) -> f32 {
    let mut plus = inputs.to_vec();
    plus[which][idx] += eps;
    let mut minus = inputs.to_vec();
    minus[which][idx] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f32, want: f32) -> f32 {
    let denom = want.abs().max(1e-3);
    (got - want).abs() / denom
}
