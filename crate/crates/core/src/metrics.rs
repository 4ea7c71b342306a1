//! Reference metrics (PSNR, SSIM, SAM, ERGAS) and no-reference metrics
//! (Dλ, Ds, QNR). Inputs are `[C, H, W]` tensors; arithmetic is f64.

use serde::{Deserialize, Serialize};

use crate::error::{argument, geometry};
use crate::wald::{blur_decimate, DegradationConfig};
use crate::{Error, Result, Scalar, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const Q_BLOCK: usize = 32;
/// Stabilizer in the Q-index numerator and denominator.
pub const Q_EPS: f64 = 1e-8;

fn same_shape<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(geometry!("shapes {:?} and {:?} differ", x.shape(), y.shape()));
    }
    if x.shape().len() != 3 {
        return Err(geometry!("expected [C, H, W], got {:?}", x.shape()));
    }
    Ok(())
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn ssim_taps() -> Vec<f64> {
    crate::wald::gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW)
}

/// Separable valid-region Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM per band, averaged over bands.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = x.dims3();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(geometry!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let taps = ssim_taps();
    let (xs, ys) = (to_f64(x), to_f64(y));
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..c {
        let xb = &xs[b * plane..(b + 1) * plane];
        let yb = &ys[b * plane..(b + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
        let mx = filter_valid(xb, h, w, &taps);
        let my = filter_valid(yb, h, w, &taps);
        let sxx = filter_valid(&prod(xb, xb), h, w, &taps);
        let syy = filter_valid(&prod(yb, yb), h, w, &taps);
        let sxy = filter_valid(&prod(xb, yb), h, w, &taps);
        let n = mx.len();
        let band: f64 = (0..n)
            .map(|i| {
                let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
                let cov = sxy[i] - mx[i] * my[i];
                ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                    / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
            })
            .sum();
        total += band / n as f64;
    }
    Ok(total / c as f64)
}

/// Mean spectral angle in radians; pixels where either vector is zero are skipped.
pub fn sam<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = x.dims3();
    if c < 2 {
        return Err(argument!("SAM needs at least 2 bands, got {c}"));
    }
    let (xs, ys) = (to_f64(x), to_f64(y));
    let plane = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..plane {
        let nx = (0..c).map(|b| xs[b * plane + i].powi(2)).sum::<f64>().sqrt();
        let ny = (0..c).map(|b| ys[b * plane + i].powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        // 2·atan2(|x̂ − ŷ|, |x̂ + ŷ|) stays accurate for nearly parallel vectors
        let (mut d, mut s) = (0.0, 0.0);
        for b in 0..c {
            let (u, v) = (xs[b * plane + i] / nx, ys[b * plane + i] / ny);
            d += (u - v).powi(2);
            s += (u + v).powi(2);
        }
        sum += 2.0 * d.sqrt().atan2(s.sqrt());
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("SAM: every pixel has a zero spectral vector".into()));
    }
    Ok(sum / count as f64)
}

/// ERGAS of `x` against the reference `y` at resolution ratio `r`.
pub fn ergas<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, r: usize) -> Result<f64> {
    same_shape(x, y)?;
    if r == 0 {
        return Err(argument!("ratio must be positive"));
    }
    let (c, h, w) = x.dims3();
    let (xs, ys) = (to_f64(x), to_f64(y));
    let plane = h * w;
    let mut acc = 0.0;
    for b in 0..c {
        let (xb, yb) = (&xs[b * plane..(b + 1) * plane], &ys[b * plane..(b + 1) * plane]);
        let mu = yb.iter().sum::<f64>() / plane as f64;
        if mu.abs() < 1e-12 {
            return Err(Error::UndefinedMetric(format!("ERGAS: band {b} of the reference has zero mean")));
        }
        let mse = xb.iter().zip(yb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / plane as f64;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / r as f64 * (acc / c as f64).sqrt())
}

/// Universal image quality index of two planes, averaged over
/// non-overlapping `B x B` blocks with `B = min(32, h, w)`.
pub fn q_index(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let bs = Q_BLOCK.min(h).min(w);
    let n = (bs * bs) as f64;
    let mut total = 0.0;
    let mut blocks = 0usize;
    for by in 0..h / bs {
        for bx in 0..w / bs {
            let idx = |k: usize| (by * bs + k / bs) * w + bx * bs + k % bs;
            let (mut ma, mut mb) = (0.0, 0.0);
            for k in 0..bs * bs {
                ma += a[idx(k)];
                mb += b[idx(k)];
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for k in 0..bs * bs {
                let (da, db) = (a[idx(k)] - ma, b[idx(k)] - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += (4.0 * cov * ma * mb + Q_EPS) / ((va + vb) * (ma * ma + mb * mb) + Q_EPS);
            blocks += 1;
        }
    }
    total / blocks as f64
}

fn planes<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (c, h, w) = t.dims3();
    let data = to_f64(t);
    (0..c).map(|b| data[b * h * w..(b + 1) * h * w].to_vec()).collect()
}

/// Spectral distortion: mean over band pairs of the change in inter-band Q.
pub fn d_lambda<T: Scalar>(fused: &Tensor<T>, lrms: &Tensor<T>) -> Result<f64> {
    if fused.shape().len() != 3 || lrms.shape().len() != 3 || fused.shape()[0] != lrms.shape()[0] {
        return Err(geometry!("band counts of {:?} and {:?} differ", fused.shape(), lrms.shape()));
    }
    let (c, fh, fw) = fused.dims3();
    let (_, lh, lw) = lrms.dims3();
    if c < 2 {
        return Err(argument!("spectral distortion needs at least 2 bands, got {c}"));
    }
    let (f, l) = (planes(fused), planes(lrms));
    let mut sum = 0.0;
    for b in 0..c {
        for k in 0..c {
            if b != k {
                sum += (q_index(&f[b], &f[k], fh, fw) - q_index(&l[b], &l[k], lh, lw)).abs();
            }
        }
    }
    Ok(sum / (c * (c - 1)) as f64)
}

/// Spatial distortion against the PAN and its blur-decimated version.
pub fn d_s<T: Scalar>(fused: &Tensor<T>, lrms: &Tensor<T>, pan: &Tensor<T>, ratio: usize) -> Result<f64> {
    if fused.shape().len() != 3 || lrms.shape().len() != 3 || pan.shape().len() != 3 {
        return Err(geometry!("expected [C, H, W] inputs"));
    }
    let (c, fh, fw) = fused.dims3();
    let (lc, lh, lw) = lrms.dims3();
    let (pc, ph, pw) = pan.dims3();
    if pc != 1 || lc != c || (ph, pw) != (fh, fw) || (lh * ratio, lw * ratio) != (fh, fw) {
        return Err(geometry!(
            "fused {:?}, LRMS {:?} and PAN {:?} are inconsistent at ratio {ratio}",
            fused.shape(),
            lrms.shape(),
            pan.shape()
        ));
    }
    let low = blur_decimate(pan, &DegradationConfig::for_ratio(ratio))?;
    let (f, l) = (planes(fused), planes(lrms));
    let (p, pl) = (to_f64(pan), to_f64(&low));
    let sum: f64 = (0..c)
        .map(|b| (q_index(&f[b], &p, fh, fw) - q_index(&l[b], &pl, lh, lw)).abs())
        .sum();
    Ok(sum / c as f64)
}

pub fn qnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// One row of an evaluation report. Reduced-resolution rows fill the four
/// reference metrics, full-resolution rows the three no-reference ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub sam: Option<f64>,
    pub ergas: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub qnr: Option<f64>,
}

pub const AGGREGATE_ID: &str = "mean";

impl MetricReport {
    pub fn reduced<T: Scalar>(id: impl Into<String>, fused: &Tensor<T>, gt: &Tensor<T>, ratio: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: Some(psnr(fused, gt)?),
            ssim: Some(ssim(fused, gt)?),
            sam: Some(sam(fused, gt)?),
            ergas: Some(ergas(fused, gt, ratio)?),
            ..Default::default()
        })
    }

    pub fn full<T: Scalar>(id: impl Into<String>, fused: &Tensor<T>, lrms: &Tensor<T>, pan: &Tensor<T>, ratio: usize) -> Result<Self> {
        let dl = d_lambda(fused, lrms)?;
        let ds = d_s(fused, lrms, pan, ratio)?;
        Ok(Self { id: id.into(), d_lambda: Some(dl), d_s: Some(ds), qnr: Some(qnr(dl, ds)), ..Default::default() })
    }

    /// Column-wise means over rows. Values are summed in sorted order so the
    /// result does not depend on row order; QNR is recomputed from the mean
    /// distortions so the product identity also holds on the aggregate row.
    pub fn aggregate(rows: &[MetricReport]) -> Result<Self> {
        if rows.is_empty() {
            return Err(argument!("cannot aggregate an empty report"));
        }
        let col = |f: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
            let mut v: Vec<f64> = rows.iter().filter_map(f).collect();
            if v.len() != rows.len() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(v.iter().sum::<f64>() / v.len() as f64)
        };
        let d_lambda = col(|r| r.d_lambda);
        let d_s = col(|r| r.d_s);
        Ok(Self {
            id: AGGREGATE_ID.into(),
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            sam: col(|r| r.sam),
            ergas: col(|r| r.ergas),
            d_lambda,
            d_s,
            qnr: d_lambda.zip(d_s).map(|(a, b)| qnr(a, b)),
        })
    }

    pub const CSV_HEADER: &'static str = "id,psnr,ssim,sam,ergas,d_lambda,d_s,qnr";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.id,
            f(self.psnr),
            f(self.ssim),
            f(self.sam),
            f(self.ergas),
            f(self.d_lambda),
            f(self.d_s),
            f(self.qnr)
        )
    }
}
