//! Raw numeric kernels behind the graph ops: im2col convolution, transposed
//! convolution and the real 2-D discrete Fourier transform pair.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::{Scalar, Tensor};

/// Output side of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel larger than padded input");
    (len + 2 * pad - k) / stride + 1
}

#[inline]
fn gemm<T: Scalar>(
    a: &ArrayView2<'_, T>,
    b: &ArrayView2<'_, T>,
    beta: T,
    c: &mut ArrayViewMut2<'_, T>,
) {
    general_mat_mul(T::one(), a, b, beta, c);
}

/// Unfolds `[c, h, w]` into `[c*k*k, oh*ow]` patch columns.
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
    let col_data = col.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col_data[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `[c, h, w]` image.
pub fn col2im<T: Scalar>(
    col: &ArrayView2<'_, T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = col.row((ci * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn kernel_side(w: &Tensor<impl Scalar>) -> usize {
    let s = w.shape();
    assert_eq!(s.len(), 4, "conv weight must be rank 4");
    assert_eq!(s[2], s[3], "square kernels only");
    s[2]
}

/// Cross-correlation with zero padding. `w` is `[cout, cin, k, k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (cin, h, wd) = x.dims3();
    let k = kernel_side(w);
    let cout = w.shape()[0];
    assert_eq!(w.shape()[1], cin, "conv input channels");
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    let wmat = ArrayView2::from_shape((cout, cin * k * k), w.data()).unwrap();
    let mut out = Array2::<T>::zeros((cout, oh * ow));
    if k == 1 && stride == 1 && pad == 0 {
        let xm = ArrayView2::from_shape((cin, h * wd), x.data()).unwrap();
        gemm(&wmat, &xm, T::zero(), &mut out.view_mut());
    } else {
        let col = im2col(x.data(), cin, h, wd, k, stride, pad);
        gemm(&wmat, &col.view(), T::zero(), &mut out.view_mut());
    }
    if let Some(b) = bias {
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b.data()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    Tensor::new(&[cout, oh, ow], out.into_raw_vec_and_offset().0)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cin, h, wd) = x.dims3();
    let k = kernel_side(w);
    let (cout, oh, ow) = grad_out.dims3();
    let wmat = ArrayView2::from_shape((cout, cin * k * k), w.data()).unwrap();
    let gmat = ArrayView2::from_shape((cout, oh * ow), grad_out.data()).unwrap();
    let pointwise = k == 1 && stride == 1 && pad == 0;

    let gx = need_x.then(|| {
        let mut dcol = Array2::<T>::zeros((cin * k * k, oh * ow));
        gemm(&wmat.t(), &gmat, T::zero(), &mut dcol.view_mut());
        if pointwise {
            Tensor::new(&[cin, h, wd], dcol.into_raw_vec_and_offset().0)
        } else {
            Tensor::new(&[cin, h, wd], col2im(&dcol.view(), cin, h, wd, k, stride, pad))
        }
    });
    let gw = need_w.then(|| {
        let mut dw = Array2::<T>::zeros((cout, cin * k * k));
        if pointwise {
            let xm = ArrayView2::from_shape((cin, h * wd), x.data()).unwrap();
            gemm(&gmat, &xm.t(), T::zero(), &mut dw.view_mut());
        } else {
            let col = im2col(x.data(), cin, h, wd, k, stride, pad);
            gemm(&gmat, &col.t(), T::zero(), &mut dw.view_mut());
        }
        Tensor::new(w.shape(), dw.into_raw_vec_and_offset().0)
    });
    let gb = need_b.then(|| {
        Tensor::new(
            &[cout],
            gmat.rows().into_iter().map(|r| r.sum()).collect(),
        )
    });
    (gx, gw, gb)
}

/// Transposed convolution without padding. `w` is `[cin, cout, k, k]`;
/// output side is `(n - 1) * stride + k`.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (cin, h, wd) = x.dims3();
    let k = kernel_side(w);
    assert_eq!(w.shape()[0], cin, "transposed conv input channels");
    let cout = w.shape()[1];
    let oh = (h - 1) * stride + k;
    let ow = (wd - 1) * stride + k;
    let wmat = ArrayView2::from_shape((cin, cout * k * k), w.data()).unwrap();
    let xm = ArrayView2::from_shape((cin, h * wd), x.data()).unwrap();
    let mut col = Array2::<T>::zeros((cout * k * k, h * wd));
    gemm(&wmat.t(), &xm, T::zero(), &mut col.view_mut());
    Tensor::new(&[cout, oh, ow], col2im(&col.view(), cout, oh, ow, k, stride, 0))
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cin, h, wd) = x.dims3();
    let k = kernel_side(w);
    let (cout, oh, ow) = grad_out.dims3();
    let col = im2col(grad_out.data(), cout, oh, ow, k, stride, 0);
    let gx = need_x.then(|| {
        let wmat = ArrayView2::from_shape((cin, cout * k * k), w.data()).unwrap();
        let mut dx = Array2::<T>::zeros((cin, h * wd));
        gemm(&wmat, &col.view(), T::zero(), &mut dx.view_mut());
        Tensor::new(&[cin, h, wd], dx.into_raw_vec_and_offset().0)
    });
    let gw = need_w.then(|| {
        let xm = ArrayView2::from_shape((cin, h * wd), x.data()).unwrap();
        let mut dw = Array2::<T>::zeros((cin, cout * k * k));
        gemm(&xm, &col.t(), T::zero(), &mut dw.view_mut());
        Tensor::new(w.shape(), dw.into_raw_vec_and_offset().0)
    });
    (gx, gw)
}

/// Cosine and sine tables of the `n`-point DFT, `F = C - iS`.
///
/// Entries at quarter turns are set exactly so the imaginary part of the DC
/// and Nyquist bins of a real signal is exactly zero.
pub fn dft_tables<T: Scalar>(n: usize) -> (Array2<T>, Array2<T>) {
    let mut cos = Array2::<T>::zeros((n, n));
    let mut sin = Array2::<T>::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let m = (a * b) % n;
            let (c, s) = if m == 0 {
                (1.0, 0.0)
            } else if 4 * m == n {
                (0.0, 1.0)
            } else if 2 * m == n {
                (-1.0, 0.0)
            } else if 4 * m == 3 * n {
                (0.0, -1.0)
            } else {
                let t = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
                (t.cos(), t.sin())
            };
            cos[(a, b)] = T::lit(c);
            sin[(a, b)] = T::lit(s);
        }
    }
    (cos, sin)
}

/// Per-channel 2-D DFT of a real `[c, h, w]` tensor. Output is `[2c, h, w]`
/// with the real parts first, then the imaginary parts.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let (ch, sh) = dft_tables::<T>(h);
    let (cw, sw) = dft_tables::<T>(w);
    let mut out = vec![T::zero(); 2 * c * h * w];
    let mut a = Array2::<T>::zeros((h, w));
    let mut b = Array2::<T>::zeros((h, w));
    for ci in 0..c {
        let xm = ArrayView2::from_shape((h, w), x.channel(ci)).unwrap();
        gemm(&ch.view(), &xm, T::zero(), &mut a.view_mut());
        gemm(&sh.view(), &xm, T::zero(), &mut b.view_mut());
        let (re_part, im_part) = out.split_at_mut(c * h * w);
        let mut re = ArrayViewMut2::from_shape((h, w), &mut re_part[ci * h * w..(ci + 1) * h * w]).unwrap();
        gemm(&a.view(), &cw.view(), T::zero(), &mut re);
        general_mat_mul(-T::one(), &b.view(), &sw.view(), T::one(), &mut re);
        let mut im = ArrayViewMut2::from_shape((h, w), &mut im_part[ci * h * w..(ci + 1) * h * w]).unwrap();
        general_mat_mul(-T::one(), &b.view(), &cw.view(), T::zero(), &mut im);
        general_mat_mul(-T::one(), &a.view(), &sw.view(), T::one(), &mut im);
    }
    Tensor::new(&[2 * c, h, w], out)
}

/// Real part of the per-channel inverse 2-D DFT of a `[2c, h, w]` spectrum
/// laid out as in [`dft2`].
pub fn idft2_real<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let (c2, h, w) = z.dims3();
    assert!(c2 % 2 == 0, "spectrum needs paired real/imaginary channels");
    let c = c2 / 2;
    let (ch, sh) = dft_tables::<T>(h);
    let (cw, sw) = dft_tables::<T>(w);
    let norm = T::one() / T::lit((h * w) as f64);
    let mut out = vec![T::zero(); c * h * w];
    let mut a = Array2::<T>::zeros((h, w));
    let mut b = Array2::<T>::zeros((h, w));
    for ci in 0..c {
        let zr = ArrayView2::from_shape((h, w), z.channel(ci)).unwrap();
        let zi = ArrayView2::from_shape((h, w), z.channel(c + ci)).unwrap();
        // a = Ch Zr - Sh Zi, b = Sh Zr + Ch Zi
        gemm(&ch.view(), &zr, T::zero(), &mut a.view_mut());
        general_mat_mul(-T::one(), &sh.view(), &zi, T::one(), &mut a.view_mut());
        gemm(&sh.view(), &zr, T::zero(), &mut b.view_mut());
        gemm(&ch.view(), &zi, T::one(), &mut b.view_mut());
        let mut o = ArrayViewMut2::from_shape((h, w), &mut out[ci * h * w..(ci + 1) * h * w]).unwrap();
        general_mat_mul(norm, &a.view(), &cw.view(), T::zero(), &mut o);
        general_mat_mul(-norm, &b.view(), &sw.view(), T::one(), &mut o);
    }
    Tensor::new(&[c, h, w], out)
}

/// Row-major matrix product `[n, k] x [k, m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul inner dimension");
    let mut out = Array2::<T>::zeros((n, m));
    gemm(&a.view2(), &b.view2(), T::zero(), &mut out.view_mut());
    Tensor::new(&[n, m], out.into_raw_vec_and_offset().0)
}

/// `a^T b` for `[k, n]`, `[k, m]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, n) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2);
    let mut out = Array2::<T>::zeros((n, m));
    gemm(&a.view2().t(), &b.view2(), T::zero(), &mut out.view_mut());
    Tensor::new(&[n, m], out.into_raw_vec_and_offset().0)
}

/// `a b^T` for `[n, k]`, `[m, k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = a.dims2();
    let (m, k2) = b.dims2();
    assert_eq!(k, k2);
    let mut out = Array2::<T>::zeros((n, m));
    gemm(&a.view2(), &b.view2().t(), T::zero(), &mut out.view_mut());
    Tensor::new(&[n, m], out.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, h, wd) = x.dims3();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = conv_out_len(h, k, stride, pad);
        let ow = conv_out_len(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, stride, pad) in &[(3, 1, 1), (1, 1, 0), (4, 4, 0), (3, 2, 1)] {
            let x = Tensor::new(&[2, 8, 8], pseudo(128, 1));
            let w = Tensor::new(&[3, 2, k, k], pseudo(6 * k * k, 2));
            let got = conv2d(&x, &w, None, stride, pad);
            let want = direct_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, conv_t(y)> with weights reinterpreted.
        let x = Tensor::new(&[2, 8, 8], pseudo(128, 3));
        let w = Tensor::new(&[3, 2, 4, 4], pseudo(96, 4));
        let y = Tensor::new(&[3, 2, 2], pseudo(12, 5));
        let lhs = conv2d(&x, &w, None, 4, 0).dot(&y);
        let rhs = x.dot(&conv_transpose2d(&y, &w, 4));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dft_roundtrip_and_dc_bin() {
        let x = Tensor::new(&[3, 8, 6], pseudo(144, 6));
        let spec = dft2(&x);
        let back = idft2_real(&spec);
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = x.channel(0).iter().sum();
        assert!((spec.channel(0)[0] - sum).abs() < 1e-12);
        assert_eq!(spec.channel(3)[0], 0.0);
    }

    #[test]
    fn dft_matches_naive_sum() {
        let (h, w) = (4, 6);
        let x = Tensor::new(&[1, h, w], pseudo(h * w, 7));
        let spec = dft2(&x);
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let t = -2.0 * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re += x.data()[y * w + xx] * t.cos();
                        im += x.data()[y * w + xx] * t.sin();
                    }
                }
                assert!((spec.channel(0)[u * w + v] - re).abs() < 1e-12);
                assert!((spec.channel(1)[u * w + v] - im).abs() < 1e-12);
            }
        }
    }
}
