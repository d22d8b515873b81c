//! Central finite-difference oracle for gradient tests.
//!
//! Only forward evaluations of the function under test are used, so these
//! helpers stay independent of the reverse-mode path they check.

use crate::tensor::Tensor;

/// Central differences of `f` at every element of `x`.
pub fn central_differences(x: &Tensor, h: f32, f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    central_differences_at(x, h, &all, f)
}

/// Central differences of `f` at the listed flat indices of `x`.
///
/// The divisor is the step actually representable in `f32`, not `2h`.
pub fn central_differences_at(
    x: &Tensor,
    h: f32,
    indices: &[usize],
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let (hi, lo) = (orig + h, orig - h);
            probe.data_mut()[i] = hi;
            let f_hi = f(&probe);
            probe.data_mut()[i] = lo;
            let f_lo = f(&probe);
            probe.data_mut()[i] = orig;
            (f_hi - f_lo) / (hi as f64 - lo as f64)
        })
        .collect()
}

/// Largest elementwise deviation, relative to the largest gradient
/// magnitude of either vector.
///
/// Returns 0 when both gradients vanish.
pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .map(|&a| (a as f64).abs())
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0, f64::max)
        / scale
}
