//! Classical component-substitution and multi-resolution fusion methods.
//! All arithmetic is done in f64; outputs are clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{argument, geometry};
use crate::raster::{bicubic_upsample, reflect_index, MsImage, PanImage};
use crate::{Error, Result, Scalar, Tensor};

/// Guard added to every ratio denominator.
pub const EPS: f64 = 1e-6;
pub const GUIDED_RADIUS: usize = 8;
pub const GUIDED_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    Ihs,
    Brovey,
    Gs,
    Sfim,
    Gfpca,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [Self::Ihs, Self::Brovey, Self::Gs, Self::Sfim, Self::Gfpca];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ihs => "ihs",
            Self::Brovey => "brovey",
            Self::Gs => "gs",
            Self::Sfim => "sfim",
            Self::Gfpca => "gfpca",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| argument!("unknown fusion method {s:?}"))
    }
}

/// Band-planar f64 copy of the inputs with shared geometry.
struct Planes {
    bands: Vec<Vec<f64>>,
    pan: Vec<f64>,
    h: usize,
    w: usize,
}

impl Planes {
    fn new<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>) -> Result<Self> {
        if (ms.height(), ms.width()) != (pan.height(), pan.width()) {
            return Err(geometry!(
                "upsampled MS {}x{} and PAN {}x{} differ",
                ms.height(),
                ms.width(),
                pan.height(),
                pan.width()
            ));
        }
        Ok(Self {
            bands: (0..ms.bands()).map(|b| ms.band(b).iter().map(|v| v.as_f64()).collect()).collect(),
            pan: pan.pixels().iter().map(|v| v.as_f64()).collect(),
            h: ms.height(),
            w: ms.width(),
        })
    }

    fn intensity(&self) -> Vec<f64> {
        let c = self.bands.len() as f64;
        (0..self.pan.len())
            .map(|i| self.bands.iter().map(|b| b[i]).sum::<f64>() / c)
            .collect()
    }

    fn finish<T: Scalar>(&self, out: Vec<Vec<f64>>) -> Result<MsImage<T>> {
        let c = out.len();
        let data = out.into_iter().flatten().map(|v| T::lit(v.clamp(0.0, 1.0))).collect();
        MsImage::new(Tensor::new(&[c, self.h, self.w], data))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// Rescales `src` to the mean and standard deviation of `reference`.
fn match_moments(src: &[f64], reference: &[f64]) -> Vec<f64> {
    let (ms, mr) = (mean(src), mean(reference));
    let (ss, sr) = (covariance(src, src).sqrt(), covariance(reference, reference).sqrt());
    let gain = if ss > EPS { sr / ss } else { 1.0 };
    src.iter().map(|v| (v - ms) * gain + mr).collect()
}

/// Mean over a `(2r+1)^2` window with symmetric reflection at the borders.
pub fn box_filter(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let n = (2 * radius + 1) as f64;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| plane[y * w + reflect_index(x as isize + d, w)])
                .sum::<f64>()
                / n;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| rows[reflect_index(y as isize + d, h) * w + x])
                .sum::<f64>()
                / n;
        }
    }
    out
}

/// Guided filter of `input` steered by `guide`.
pub fn guided_filter(guide: &[f64], input: &[f64], h: usize, w: usize, radius: usize, eps: f64) -> Vec<f64> {
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mean_i = box_filter(guide, h, w, radius);
    let mean_p = box_filter(input, h, w, radius);
    let corr_ii = box_filter(&mul(guide, guide), h, w, radius);
    let corr_ip = box_filter(&mul(guide, input), h, w, radius);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = corr_ii[i] - mean_i[i] * mean_i[i];
        let cov = corr_ip[i] - mean_i[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_i[i];
    }
    let (ma, mb) = (box_filter(&a, h, w, radius), box_filter(&b, h, w, radius));
    (0..h * w).map(|i| ma[i] * guide[i] + mb[i]).collect()
}

fn ihs_planes(p: &Planes) -> Vec<Vec<f64>> {
    let intensity = p.intensity();
    p.bands
        .iter()
        .map(|b| b.iter().zip(&p.pan).zip(&intensity).map(|((m, pan), i)| m + (pan - i)).collect())
        .collect()
}

/// Generalized IHS: adds `PAN - I` to every band, `I` the band mean.
pub fn ihs_fuse<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>) -> Result<MsImage<T>> {
    if ms.bands() < 3 {
        return Err(argument!("IHS needs at least 3 bands, got {}", ms.bands()));
    }
    let p = Planes::new(ms, pan)?;
    p.finish(ihs_planes(&p))
}

/// Brovey: scales every band by `(PAN + eps) / (I + eps)`.
pub fn brovey_fuse<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>) -> Result<MsImage<T>> {
    let p = Planes::new(ms, pan)?;
    let intensity = p.intensity();
    let ratio: Vec<f64> = p.pan.iter().zip(&intensity).map(|(pv, i)| (pv + EPS) / (i + EPS)).collect();
    p.finish(p.bands.iter().map(|b| b.iter().zip(&ratio).map(|(m, r)| m * r).collect()).collect())
}

/// Gram-Schmidt substitution with the band mean as simulated intensity.
pub fn gs_fuse<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>) -> Result<MsImage<T>> {
    let p = Planes::new(ms, pan)?;
    let intensity = p.intensity();
    let var_i = covariance(&intensity, &intensity);
    if var_i < EPS * EPS {
        log::warn!("GS: intensity variance {var_i:e} is degenerate, falling back to IHS");
        return p.finish(ihs_planes(&p));
    }
    let matched = match_moments(&p.pan, &intensity);
    let detail: Vec<f64> = matched.iter().zip(&intensity).map(|(a, b)| a - b).collect();
    let out = p
        .bands
        .iter()
        .map(|b| {
            let gain = covariance(b, &intensity) / var_i;
            b.iter().zip(&detail).map(|(m, d)| m + gain * d).collect()
        })
        .collect();
    p.finish(out)
}

/// SFIM: `MS * (PAN + eps) / (box_{2r+1}(PAN) + eps)`.
pub fn sfim_fuse<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>, ratio: usize) -> Result<MsImage<T>> {
    let p = Planes::new(ms, pan)?;
    let low = box_filter(&p.pan, p.h, p.w, ratio);
    let gain: Vec<f64> = p.pan.iter().zip(&low).map(|(a, l)| (a + EPS) / (l + EPS)).collect();
    p.finish(p.bands.iter().map(|b| b.iter().zip(&gain).map(|(m, g)| m * g).collect()).collect())
}

/// PCA over bands; PC1 is replaced by the moment-matched PAN, guided-filtered
/// with PC1 as the guide, and the transform is inverted.
pub fn gfpca_fuse<T: Scalar>(ms: &MsImage<T>, pan: &PanImage<T>) -> Result<MsImage<T>> {
    let p = Planes::new(ms, pan)?;
    let c = p.bands.len();
    let means: Vec<f64> = p.bands.iter().map(|b| mean(b)).collect();
    let cov = DMatrix::from_fn(c, c, |i, j| covariance(&p.bands[i], &p.bands[j]));
    let eig = SymmetricEigen::new(cov);
    let (top, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one band");
    if lambda < EPS * EPS {
        log::warn!("GFPCA: band covariance is degenerate, falling back to IHS");
        return p.finish(ihs_planes(&p));
    }
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    // orient PC1 so it grows with overall brightness
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let n = p.pan.len();
    let pc1: Vec<f64> = (0..n)
        .map(|i| (0..c).map(|b| v[b] * (p.bands[b][i] - means[b])).sum())
        .collect();
    let matched = match_moments(&p.pan, &pc1);
    let replaced = guided_filter(&pc1, &matched, p.h, p.w, GUIDED_RADIUS, GUIDED_EPS);
    let out = (0..c)
        .map(|b| (0..n).map(|i| p.bands[b][i] + v[b] * (replaced[i] - pc1[i])).collect())
        .collect();
    p.finish(out)
}

/// Upsamples `lrms` by `ratio` with bicubic interpolation and runs `method`.
pub fn fuse_classical<T: Scalar>(method: FusionMethod, lrms: &MsImage<T>, pan: &PanImage<T>, ratio: usize) -> Result<MsImage<T>> {
    let up = bicubic_upsample(lrms, ratio)?;
    match method {
        FusionMethod::Ihs => ihs_fuse(&up, pan),
        FusionMethod::Brovey => brovey_fuse(&up, pan),
        FusionMethod::Gs => gs_fuse(&up, pan),
        FusionMethod::Sfim => sfim_fuse(&up, pan, ratio),
        FusionMethod::Gfpca => gfpca_fuse(&up, pan),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ms(seed: u64, c: usize, h: usize, w: usize) -> MsImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MsImage::new(Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.05..0.95))).unwrap()
    }

    fn random_pan(seed: u64, h: usize, w: usize) -> PanImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PanImage::new(Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.05..0.95))).unwrap()
    }

    fn band_mean_pan(ms: &MsImage<f64>) -> PanImage<f64> {
        let (c, h, w) = (ms.bands(), ms.height(), ms.width());
        PanImage::new(Tensor::from_fn(&[1, h, w], |i| (0..c).map(|b| ms.band(b)[i]).sum::<f64>() / c as f64)).unwrap()
    }

    fn max_dev(a: &MsImage<f64>, b: &MsImage<f64>) -> f64 {
        a.tensor().zip_map(b.tensor(), |x, y| x - y).max_abs()
    }

    #[test]
    fn method_names_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.name().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("pca".parse::<FusionMethod>().is_err());
    }

    #[test]
    fn zero_detail_returns_ms() {
        let ms = random_ms(1, 4, 12, 12);
        let pan = band_mean_pan(&ms);
        assert!(max_dev(&ihs_fuse(&ms, &pan).unwrap(), &ms) < 1e-12);
        assert!(max_dev(&brovey_fuse(&ms, &pan).unwrap(), &ms) < 1e-12);
        assert!(max_dev(&gs_fuse(&ms, &pan).unwrap(), &ms) < 1e-12);
        let flat = PanImage::<f64>::constant(12, 12, 0.4).unwrap();
        assert!(max_dev(&sfim_fuse(&ms, &flat, 4).unwrap(), &ms) < 1e-12);
    }

    #[test]
    fn constant_images_unchanged() {
        let ms = MsImage::<f64>::constant(10, 10, 4, 0.3).unwrap();
        let pan = PanImage::<f64>::constant(10, 10, 0.3).unwrap();
        for m in FusionMethod::ALL {
            let out = match m {
                FusionMethod::Ihs => ihs_fuse(&ms, &pan),
                FusionMethod::Brovey => brovey_fuse(&ms, &pan),
                FusionMethod::Gs => gs_fuse(&ms, &pan),
                FusionMethod::Sfim => sfim_fuse(&ms, &pan, 4),
                FusionMethod::Gfpca => gfpca_fuse(&ms, &pan),
            }
            .unwrap();
            assert!(max_dev(&out, &ms) < 1e-12, "{m}");
        }
    }

    #[test]
    fn ihs_against_scalar_loop() {
        let ms = random_ms(2, 3, 4, 4);
        let pan = random_pan(3, 4, 4);
        let out = ihs_fuse(&ms, &pan).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let i = (ms.get(0, y, x) + ms.get(1, y, x) + ms.get(2, y, x)) / 3.0;
                for b in 0..3 {
                    let expect = (ms.get(b, y, x) + pan.pixels()[y * 4 + x] - i).clamp(0.0, 1.0);
                    assert!((out.get(b, y, x) - expect).abs() < 1e-6);
                }
            }
        }
        assert!(matches!(ihs_fuse(&random_ms(1, 2, 4, 4), &pan), Err(Error::Argument(_))));
    }

    #[test]
    fn brovey_against_scalar_loop_and_band_ratios() {
        let ms = random_ms(4, 3, 4, 4);
        let pan = random_pan(5, 4, 4);
        let out = brovey_fuse(&ms, &pan).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let i = (ms.get(0, y, x) + ms.get(1, y, x) + ms.get(2, y, x)) / 3.0;
                let k = (pan.pixels()[y * 4 + x] + EPS) / (i + EPS);
                for b in 0..3 {
                    let expect = (ms.get(b, y, x) * k).clamp(0.0, 1.0);
                    assert!((out.get(b, y, x) - expect).abs() < 1e-6);
                }
                if out.get(2, y, x) < 1.0 && out.get(0, y, x) < 1.0 {
                    let r_out = out.get(0, y, x) / out.get(2, y, x);
                    assert!((r_out - ms.get(0, y, x) / ms.get(2, y, x)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gs_against_dense_oracle() {
        let ms = random_ms(6, 4, 8, 8);
        let pan = random_pan(7, 8, 8);
        let out = gs_fuse(&ms, &pan).unwrap();
        // stack [B1..B4, I, P] as columns and take the sample covariance matrix
        let n = 64;
        let mut cols = DMatrix::<f64>::zeros(n, 6);
        for i in 0..n {
            let mut s = 0.0;
            for b in 0..4 {
                cols[(i, b)] = ms.band(b)[i];
                s += ms.band(b)[i];
            }
            cols[(i, 4)] = s / 4.0;
            cols[(i, 5)] = pan.pixels()[i];
        }
        let mu = cols.row_mean();
        let centered = DMatrix::from_fn(n, 6, |i, j| cols[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let gain_p = (cov[(4, 4)] / cov[(5, 5)]).sqrt();
        for i in 0..n {
            let matched = (cols[(i, 5)] - mu[5]) * gain_p + mu[4];
            for b in 0..4 {
                let expect = (cols[(i, b)] + cov[(b, 4)] / cov[(4, 4)] * (matched - cols[(i, 4)])).clamp(0.0, 1.0);
                assert!((out.band(b)[i] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sfim_against_scalar_loop() {
        let ms = random_ms(8, 3, 8, 8);
        let pan = random_pan(9, 8, 8);
        let r = 2;
        let out = sfim_fuse(&ms, &pan, r).unwrap();
        let px = pan.pixels();
        for y in 0..8 {
            for x in 0..8 {
                let mut s = 0.0;
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let yy = reflect_index(y as isize + dy, 8);
                        let xx = reflect_index(x as isize + dx, 8);
                        s += px[yy * 8 + xx];
                    }
                }
                let low = s / 25.0;
                for b in 0..3 {
                    let expect = (ms.get(b, y, x) * (px[y * 8 + x] + EPS) / (low + EPS)).clamp(0.0, 1.0);
                    assert!((out.get(b, y, x) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sfim_smooth_pan_is_identity_in_the_interior() {
        // a linear ramp equals its own box average away from the borders
        let ms = random_ms(10, 3, 16, 16);
        let pan = PanImage::new(Tensor::from_fn(&[1, 16, 16], |i| 0.2 + 0.02 * (i % 16) as f64 + 0.01 * (i / 16) as f64)).unwrap();
        let out = sfim_fuse(&ms, &pan, 2).unwrap();
        for b in 0..3 {
            for y in 2..14 {
                for x in 2..14 {
                    assert!((out.get(b, y, x) - ms.get(b, y, x)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gfpca_with_pan_equal_to_pc1() {
        // strongly correlated bands: a shared field plus small offsets
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (32, 32);
        let field: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let ms = MsImage::new(Tensor::from_fn(&[4, h, w], |i| {
            let b = i / (h * w);
            0.01 + 0.95 * field[i % (h * w)] + 0.01 * b as f64
        }))
        .unwrap();
        // any affine image of PC1 has PC1's statistics after moment matching
        let pan = PanImage::new(Tensor::from_fn(&[1, h, w], |i| 0.1 + 0.8 * field[i])).unwrap();
        let out = gfpca_fuse(&ms, &pan).unwrap();
        let mad = out.tensor().zip_map(ms.tensor(), |a, b| (a - b).abs()).sum() / out.tensor().len() as f64;
        assert!(mad < 1e-3, "mean abs deviation {mad}");
        assert_eq!(out.tensor().shape(), ms.tensor().shape());
    }

    #[test]
    fn geometry_mismatch() {
        let ms = random_ms(1, 4, 8, 8);
        let pan = random_pan(1, 8, 6);
        assert!(matches!(gs_fuse(&ms, &pan), Err(Error::Geometry(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_in_range_and_deterministic(seed in 0u64..1000) {
            let lrms = random_ms(seed, 4, 8, 8);
            let pan = random_pan(seed + 1, 32, 32);
            for m in FusionMethod::ALL {
                let a = fuse_classical(m, &lrms, &pan, 4).unwrap();
                prop_assert_eq!(a.tensor().shape(), &[4, 32, 32]);
                prop_assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(&a, &fuse_classical(m, &lrms, &pan, 4).unwrap());
            }
        }
    }
}
