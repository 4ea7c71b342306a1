//! Central finite differences for checking reverse-mode gradients.

use crate::{Scalar, Tensor};

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let step = T::lit(h);
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (T::lit(2.0) * step);
    }
    out
}

/// Finite-difference directional derivative `(f(x + h d) - f(x - h d)) / 2h`.
pub fn directional_derivative<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    dir: &Tensor<T>,
    h: f64,
) -> f64 {
    let step = T::lit(h);
    let plus = x.zip_map(dir, |a, d| a + step * d);
    let minus = x.zip_map(dir, |a, d| a - step * d);
    (f(&plus).as_f64() - f(&minus).as_f64()) / (2.0 * h)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute error when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y);
    let nd = diff.dot(&diff).as_f64().sqrt();
    let scale = a.dot(a).as_f64().sqrt().max(b.dot(b).as_f64().sqrt());
    if scale < 1e-12 {
        nd
    } else {
        nd / scale
    }
}

/// Scalar version of [`relative_error`].
pub fn relative_error_scalar(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}
