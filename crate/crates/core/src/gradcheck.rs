//! Central finite-difference gradient checking.
//!
//! The oracle only ever calls the forward pass: a scalar-valued closure is
//! re-evaluated with one input element nudged up and down, and the slope is
//! compared against the analytic gradient produced by the tape. Run this in
//! f64; in f32 the difference quotient drowns in rounding noise.

use crate::scalar::Scalar;

/// Largest relative error between analytic and central finite-difference
/// gradients, probing every element of one input buffer.
///
/// `forward` must recompute the scalar loss from scratch for the given
/// buffer contents; `analytic` is the gradient the tape produced for it.
///
/// Per-element denominators are floored at a small fraction of the
/// gradient's overall magnitude: elements orders of magnitude below the
/// gradient scale sit inside the difference quotient's rounding noise
/// (eps * loss / step), where a per-element relative error is meaningless.
/// A genuinely wrong backward rule perturbs elements at the gradient scale
/// and still trips the check.
pub fn max_rel_error<T: Scalar>(
    input: &[T],
    analytic: &[T],
    step: T,
    mut forward: impl FnMut(&[T]) -> T,
) -> T {
    assert_eq!(input.len(), analytic.len());
    let mut fd = vec![T::zero(); input.len()];
    let mut buf = input.to_vec();
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let up = forward(&buf);
        buf[i] = orig - step;
        let down = forward(&buf);
        buf[i] = orig;
        fd[i] = (up - down) / (step + step);
    }
    let scale = analytic
        .iter()
        .chain(fd.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    let floor = (scale * T::from_f64(1e-3)).max(T::from_f64(1e-8));
    let mut worst = T::zero();
    for (&a, &f) in analytic.iter().zip(&fd) {
        let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
        if err > worst {
            worst = err;
        }
    }
    worst
}
