//! Central finite differences and the relative-error metric used by every
//! gradient check in the crate.

use super::matrix::{Matrix, Real};

/// Numerical gradient of the scalar `f` at `x` by central differences.
pub fn central_diff<F>(x: &Matrix, h: Real, mut f: F) -> Matrix
where
    F: FnMut(&Matrix) -> Real,
{
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` in the Frobenius norm; 0 when both vanish.
pub fn rel_err(a: &Matrix, b: &Matrix) -> Real {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let diff: Real = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        .sqrt();
    let scale = a.frobenius().max(b.frobenius());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
