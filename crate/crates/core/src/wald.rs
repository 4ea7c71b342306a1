//! Wald-protocol simulation: blur and decimate full-resolution scenes into
//! (low-resolution MS, PAN, ground truth) triples, plus a synthetic scene
//! generator for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{argument, geometry};
use crate::raster::{reflect_index, MsImage, PanImage};
use crate::{Error, Result, Scalar, Tensor};

/// One aligned training triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T> {
    pub lrms: MsImage<T>,
    pub pan: PanImage<T>,
    pub gt: MsImage<T>,
    pub ratio: usize,
}

impl<T: Scalar> SamplePair<T> {
    pub fn new(lrms: MsImage<T>, pan: PanImage<T>, gt: MsImage<T>, ratio: usize) -> Result<Self> {
        let pair = Self { lrms, pan, gt, ratio };
        pair.check()?;
        Ok(pair)
    }

    pub fn check(&self) -> Result<()> {
        let r = self.ratio;
        if r == 0 {
            return Err(geometry!("ratio must be positive"));
        }
        if self.gt.bands() != self.lrms.bands() {
            return Err(geometry!(
                "ground truth has {} bands, low-resolution MS has {}",
                self.gt.bands(),
                self.lrms.bands()
            ));
        }
        let (h, w) = (self.lrms.height() * r, self.lrms.width() * r);
        if (self.pan.height(), self.pan.width()) != (h, w) || (self.gt.height(), self.gt.width()) != (h, w) {
            return Err(geometry!(
                "expected PAN and ground truth {h}x{w} for {}x{} MS at ratio {r}, got PAN {}x{} and ground truth {}x{}",
                self.lrms.height(),
                self.lrms.width(),
                self.pan.height(),
                self.pan.width(),
                self.gt.height(),
                self.gt.width()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub ratio: usize,
    pub blur_sigma: f64,
    pub kernel_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl DegradationConfig {
    /// Gaussian blur with `sigma = r / 2` and size `2r + 1`, no noise.
    pub fn for_ratio(ratio: usize) -> Self {
        Self {
            ratio,
            blur_sigma: ratio as f64 / 2.0,
            kernel_size: 2 * ratio + 1,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(argument!("ratio must be at least 1"));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(argument!("kernel size must be odd and at least 3, got {}", self.kernel_size));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(argument!("blur sigma must be positive, got {}", self.blur_sigma));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(argument!("noise std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.blur_sigma, self.kernel_size)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is its outer product.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn blur_line(src: &[f64], taps: &[f64], dst: &mut [f64]) {
    let n = src.len();
    let half = (taps.len() / 2) as isize;
    for (i, out) in dst.iter_mut().enumerate() {
        *out = taps
            .iter()
            .enumerate()
            .map(|(k, &w)| w * src[reflect_index(i as isize + k as isize - half, n)])
            .sum();
    }
}

/// Separable blur of every channel with symmetric reflection at the borders.
pub fn blur_tensor<T: Scalar>(t: &Tensor<T>, taps: &[f64]) -> Tensor<T> {
    let (c, h, w) = t.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![0.0; h * w];
    let mut line = vec![0.0; h.max(w)];
    let mut line_out = vec![0.0; h.max(w)];
    for ci in 0..c {
        let plane = t.channel(ci);
        for y in 0..h {
            for x in 0..w {
                line[x] = plane[y * w + x].as_f64();
            }
            blur_line(&line[..w], taps, &mut tmp[y * w..(y + 1) * w]);
        }
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for x in 0..w {
            for y in 0..h {
                line[y] = tmp[y * w + x];
            }
            blur_line(&line[..h], taps, &mut line_out[..h]);
            for y in 0..h {
                dst[y * w + x] = T::lit(line_out[y]);
            }
        }
    }
    out
}

/// Keeps the top-left sample of every `r x r` block.
pub fn decimate_tensor<T: Scalar>(t: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = t.dims3();
    let (oh, ow) = (h / r, w / r);
    let d = t.data();
    Tensor::from_fn(&[c, oh, ow], |i| {
        let x = i % ow;
        let y = (i / ow) % oh;
        let ci = i / (ow * oh);
        d[(ci * h + y * r) * w + x * r]
    })
}

fn check_divisible(h: usize, w: usize, r: usize, what: &str) -> Result<()> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(geometry!("{what} {h}x{w} is not divisible by ratio {r}"));
    }
    Ok(())
}

/// `decimate(blur(t))` without noise.
pub fn blur_decimate<T: Scalar>(t: &Tensor<T>, cfg: &DegradationConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, h, w) = t.dims3();
    check_divisible(h, w, cfg.ratio, "image")?;
    Ok(decimate_tensor(&blur_tensor(t, &cfg.kernel()), cfg.ratio))
}

/// Wald degradation: MS and PAN are both reduced by `r`; the input MS
/// becomes the ground truth.
pub fn degrade<T: Scalar>(scene_ms: &MsImage<T>, scene_pan: &PanImage<T>, cfg: &DegradationConfig) -> Result<SamplePair<T>> {
    cfg.validate()?;
    let r = cfg.ratio;
    check_divisible(scene_ms.height(), scene_ms.width(), r, "MS scene")?;
    if (scene_pan.height(), scene_pan.width()) != (scene_ms.height() * r, scene_ms.width() * r) {
        return Err(geometry!(
            "PAN scene {}x{} must be {r}x the MS scene {}x{}",
            scene_pan.height(),
            scene_pan.width(),
            scene_ms.height(),
            scene_ms.width()
        ));
    }
    let mut lrms = blur_decimate(scene_ms.tensor(), cfg)?;
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
        for v in lrms.data_mut() {
            *v = T::lit(v.as_f64() + normal.sample(&mut rng));
        }
    }
    let pan = blur_decimate(scene_pan.tensor(), cfg)?;
    let mut lrms = MsImage::from_clipped(lrms)?;
    if let Some(names) = scene_ms.band_names() {
        lrms = lrms.with_band_names(names.to_vec())?;
    }
    SamplePair::new(lrms, PanImage::from_clipped(pan)?, scene_ms.clone(), r)
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, side: usize) -> Tensor<T> {
    let (c, _, w) = t.dims3();
    let d = t.data();
    let full_h = t.shape()[1];
    Tensor::from_fn(&[c, side, side], |i| {
        let x = i % side;
        let y = (i / side) % side;
        let ci = i / (side * side);
        d[(ci * full_h + y0 + y) * w + x0 + x]
    })
}

/// Tiles every pair into aligned patches of PAN side `pan_patch`, stepping
/// by `stride` PAN pixels. Both must be multiples of the pair's ratio.
pub fn crop_patch_dataset<T: Scalar>(pairs: &[SamplePair<T>], pan_patch: usize, stride: usize) -> Result<Vec<SamplePair<T>>> {
    let mut out = Vec::new();
    for pair in pairs {
        pair.check()?;
        let r = pair.ratio;
        if pan_patch == 0 || pan_patch % r != 0 {
            return Err(argument!("patch side {pan_patch} is not a positive multiple of ratio {r}"));
        }
        if stride == 0 || stride % r != 0 {
            return Err(argument!("stride {stride} is not a positive multiple of ratio {r}"));
        }
        let (h, w) = (pair.pan.height(), pair.pan.width());
        if pan_patch > h || pan_patch > w {
            return Err(argument!("patch side {pan_patch} exceeds scene {h}x{w}"));
        }
        let ms_side = pan_patch / r;
        for y in (0..=h - pan_patch).step_by(stride) {
            for x in (0..=w - pan_patch).step_by(stride) {
                let lrms = MsImage::new(crop(pair.lrms.tensor(), y / r, x / r, ms_side))?;
                let pan = PanImage::new(crop(pair.pan.tensor(), y, x, pan_patch))?;
                let gt = MsImage::new(crop(pair.gt.tensor(), y, x, pan_patch))?;
                out.push(SamplePair::new(lrms, pan, gt, r)?);
            }
        }
    }
    Ok(out)
}

/// Deterministic synthetic scene: piecewise-constant materials with smooth
/// shading and a texture shared by all bands. PAN is a positive weighted
/// sum of the MS bands plus a faint texture of its own.
pub fn synth_toy_scene<T: Scalar>(seed: u64, size: usize, bands: usize) -> Result<(MsImage<T>, PanImage<T>)> {
    if size < 4 {
        return Err(geometry!("scene side {size} too small"));
    }
    if bands < 2 {
        return Err(argument!("a multi-spectral scene needs at least 2 bands"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;

    let regions = 6 + (size * size) / 1024;
    let centers: Vec<(f64, f64)> = (0..regions)
        .map(|_| (rng.random_range(0.0..sz), rng.random_range(0.0..sz)))
        .collect();
    let spectra: Vec<Vec<f64>> = (0..regions)
        .map(|_| (0..bands).map(|_| rng.random_range(0.15..0.8)).collect())
        .collect();

    // (fx, fy, phase, amplitude) per wave
    let mut waves = |n: usize, fmin: f64, fmax: f64, amp: f64| -> Vec<(f64, f64, f64, f64)> {
        (0..n)
            .map(|_| {
                let f = rng.random_range(fmin..fmax);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                (f * th.cos(), f * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect()
    };
    let shading: Vec<Vec<_>> = (0..bands).map(|_| waves(3, 0.005, 0.02, 0.04)).collect();
    let texture = waves(8, 0.08, 0.35, 0.025);
    let pan_texture = waves(4, 0.1, 0.4, 0.006);
    let gains: Vec<f64> = (0..bands).map(|_| rng.random_range(0.6..1.0)).collect();
    let weights: Vec<f64> = (0..bands).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();

    let eval = |ws: &[(f64, f64, f64, f64)], x: f64, y: f64| -> f64 {
        ws.iter()
            .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
            .sum()
    };

    let mut ms = vec![0.0; bands * size * size];
    let mut pan = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let region = centers
                .iter()
                .enumerate()
                .map(|(i, &(cx, cy))| (i, (cx - xf).powi(2) + (cy - yf).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let tex = eval(&texture, xf, yf);
            let mut p = 0.0;
            for b in 0..bands {
                let v = (spectra[region][b] + eval(&shading[b], xf, yf) + gains[b] * tex).clamp(0.0, 1.0);
                ms[(b * size + y) * size + x] = v;
                p += weights[b] * v;
            }
            pan[y * size + x] = (p / wsum + eval(&pan_texture, xf, yf)).clamp(0.0, 1.0);
        }
    }
    let ms = MsImage::new(Tensor::new(&[bands, size, size], ms.into_iter().map(T::lit).collect()))?;
    let pan = PanImage::new(Tensor::new(&[1, size, size], pan.into_iter().map(T::lit).collect()))?;
    Ok((ms, pan))
}

/// Simulated sensor acquisition of a synthetic scene: the scene is drawn at
/// `size` and the MS sensor sees it through the blur/decimate operator, so
/// the result is an MS image of side `size / r` with a PAN of side `size`.
pub fn synth_acquisition<T: Scalar>(seed: u64, size: usize, bands: usize, cfg: &DegradationConfig) -> Result<(MsImage<T>, PanImage<T>)> {
    let (ms, pan) = synth_toy_scene::<T>(seed, size, bands)?;
    let sensor_ms = MsImage::from_clipped(blur_decimate(ms.tensor(), cfg)?)?;
    Ok((sensor_ms, pan))
}

/// Builds Wald pairs from `scenes` synthetic acquisitions of side `size`.
/// Scene `i` uses seed `seed + i`; the noise stream is derived the same way.
pub fn synth_pairs<T: Scalar>(seed: u64, scenes: usize, size: usize, bands: usize, cfg: &DegradationConfig) -> Result<Vec<SamplePair<T>>> {
    (0..scenes as u64)
        .map(|i| {
            let (ms, pan) = synth_acquisition::<T>(seed.wrapping_add(i), size, bands, cfg)?;
            let scene_cfg = DegradationConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            };
            degrade(&ms, &pan, &scene_cfg)
        })
        .collect()
}
