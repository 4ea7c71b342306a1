//! The H-subproblem of half-quadratic splitting on plain tensors:
//! `f2(H) = 1/2 |L - A H|^2 + eta/2 |U - H|^2` and its gradient step.

use crate::degradation::DegradeOp;
use crate::error::geometry;
use crate::{Result, Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(geometry!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn f2_objective<T: Scalar, O: DegradeOp<T>>(h: &Tensor<T>, u: &Tensor<T>, l: &Tensor<T>, eta: f64, op: &O) -> Result<f64> {
    same_shape(h, u, "H and U")?;
    let ah = op.down(h)?;
    same_shape(&ah, l, "DK H and L")?;
    let data: f64 = ah.data().iter().zip(l.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    let prox: f64 = h.data().iter().zip(u.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(0.5 * data + 0.5 * eta * prox)
}

/// `A^T (A H - L) + eta (H - U)`.
pub fn f2_gradient<T: Scalar, O: DegradeOp<T>>(h: &Tensor<T>, u: &Tensor<T>, l: &Tensor<T>, eta: f64, op: &O) -> Result<Tensor<T>> {
    same_shape(h, u, "H and U")?;
    let ah = op.down(h)?;
    same_shape(&ah, l, "DK H and L")?;
    let residual = ah.zip_map(l, |a, b| a - b);
    let back = op.up(&residual)?;
    same_shape(&back, h, "(DK)^T residual and H")?;
    let e = T::lit(eta);
    let mut out = back;
    for ((o, &hv), &uv) in out.data_mut().iter_mut().zip(h.data()).zip(u.data()) {
        *o += e * (hv - uv);
    }
    Ok(out)
}

/// `H - delta * grad f2(H)`.
pub fn hqs_h_step<T: Scalar, O: DegradeOp<T>>(
    h: &Tensor<T>,
    u: &Tensor<T>,
    l: &Tensor<T>,
    delta: f64,
    eta: f64,
    op: &O,
) -> Result<Tensor<T>> {
    let grad = f2_gradient(h, u, l, eta, op)?;
    let d = T::lit(delta);
    Ok(h.zip_map(&grad, |a, b| a - d * b))
}
