use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, geometry};
use crate::{Result, Scalar, Tensor};

fn check_ratio(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(argument!("mask ratio {rho} outside [0, 1]"));
    }
    Ok(())
}

/// Marks `round(rho * n)` of `n` slots, chosen by a seeded shuffle.
fn sample_mask(n: usize, rho: f64, seed: u64) -> Vec<bool> {
    let count = (rho * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = vec![false; n];
    for &i in &order[..count.min(n)] {
        masked[i] = true;
    }
    masked
}

/// Random cell mask over a `ceil(h/p) x ceil(w/p)` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMaskSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Row-major over the cell grid; `true` means masked.
    pub masked: Vec<bool>,
}

pub fn make_spatial_mask(h: usize, w: usize, p: usize, rho: f64, seed: u64) -> Result<SpatialMaskSpec> {
    check_ratio(rho)?;
    if p == 0 || p > h.min(w) {
        return Err(argument!("patch side {p} must be in 1..={}", h.min(w)));
    }
    let cells = h.div_ceil(p) * w.div_ceil(p);
    Ok(SpatialMaskSpec {
        height: h,
        width: w,
        patch: p,
        mask_ratio: rho,
        seed,
        masked: sample_mask(cells, rho, seed),
    })
}

impl SpatialMaskSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.height.div_ceil(self.patch), self.width.div_ceil(self.patch))
    }

    pub fn cells(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&c| !self.masked[c]).collect()
    }

    pub fn masked_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&c| self.masked[c]).collect()
    }

    /// Per-pixel mask of length `height * width`.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let (_, gw) = self.grid();
        let p = self.patch;
        (0..self.height * self.width)
            .map(|i| {
                let (y, x) = (i / self.width, i % self.width);
                self.masked[(y / p) * gw + x / p]
            })
            .collect()
    }
}

/// Replaces masked pixels by the per-band `token`, keeping the image whole.
pub fn apply_spatial_mask<T: Scalar>(img: &Tensor<T>, spec: &SpatialMaskSpec, token: &[T]) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3();
    if (h, w) != (spec.height, spec.width) {
        return Err(geometry!("mask is {}x{}, image is {h}x{w}", spec.height, spec.width));
    }
    if token.len() != c {
        return Err(geometry!("{} token values for {c} bands", token.len()));
    }
    let pm = spec.pixel_mask();
    let mut out = img.clone();
    for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for (v, &m) in plane.iter_mut().zip(&pm) {
            if m {
                *v = token[ci];
            }
        }
    }
    Ok(out)
}

/// Random mask over the joint (spatial cell, band group) token lattice.
/// Token index is `cell * groups + group`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSpectralMaskSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub patch: usize,
    pub group: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub masked: Vec<bool>,
}

/// Checks that `(h, w, bands)` tiles exactly into `p x p x group` tokens and
/// returns the token count.
pub fn token_count(h: usize, w: usize, bands: usize, p: usize, group: usize) -> Result<usize> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(argument!("patch side {p} does not divide image {h}x{w}"));
    }
    if group == 0 || bands % group != 0 {
        return Err(argument!("band group {group} does not divide {bands} bands"));
    }
    Ok((h / p) * (w / p) * (bands / group))
}

pub fn make_spatial_spectral_mask(
    h: usize,
    w: usize,
    bands: usize,
    p: usize,
    group: usize,
    rho: f64,
    seed: u64,
) -> Result<SpatialSpectralMaskSpec> {
    check_ratio(rho)?;
    let n = token_count(h, w, bands, p, group)?;
    Ok(SpatialSpectralMaskSpec {
        height: h,
        width: w,
        bands,
        patch: p,
        group,
        mask_ratio: rho,
        seed,
        masked: sample_mask(n, rho, seed),
    })
}

impl SpatialSpectralMaskSpec {
    pub fn tokens(&self) -> usize {
        self.masked.len()
    }

    pub fn groups(&self) -> usize {
        self.bands / self.group
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_tokens(&self) -> Vec<usize> {
        (0..self.tokens()).filter(|&t| !self.masked[t]).collect()
    }

    pub fn masked_tokens(&self) -> Vec<usize> {
        (0..self.tokens()).filter(|&t| self.masked[t]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn extreme_ratios() {
        let none = make_spatial_mask(32, 32, 8, 0.0, 1).unwrap();
        assert_eq!(none.masked_count(), 0);
        let all = make_spatial_mask(32, 32, 8, 1.0, 1).unwrap();
        assert_eq!(all.masked_count(), 16);
    }

    #[test]
    fn three_quarters_of_256_cells() {
        let m = make_spatial_mask(128, 128, 8, 0.75, 42).unwrap();
        assert_eq!(m.cells(), 256);
        assert_eq!(m.masked_count(), 192);
    }

    #[test]
    fn ragged_grid_rounds_up() {
        let m = make_spatial_mask(10, 17, 4, 0.5, 0).unwrap();
        assert_eq!(m.grid(), (3, 5));
        assert_eq!(m.pixel_mask().len(), 170);
    }

    #[test]
    fn patch_larger_than_image() {
        assert!(matches!(make_spatial_mask(8, 16, 9, 0.5, 0), Err(Error::Argument(_))));
        assert!(matches!(make_spatial_mask(8, 8, 4, 1.5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn apply_mask_cases() {
        let img = Tensor::<f64>::from_fn(&[2, 8, 8], |i| (i as f64 * 0.013).fract());
        let m0 = make_spatial_mask(8, 8, 2, 0.0, 3).unwrap();
        assert_eq!(apply_spatial_mask(&img, &m0, &[0.5, 0.5]).unwrap(), img);
        let m1 = make_spatial_mask(8, 8, 2, 1.0, 3).unwrap();
        let full = apply_spatial_mask(&img, &m1, &[0.25, 0.25]).unwrap();
        assert!(full.data().iter().all(|&v| v == 0.25));

        let half = make_spatial_mask(8, 8, 2, 0.5, 9).unwrap();
        let out = apply_spatial_mask(&img, &half, &[0.1, 0.9]).unwrap();
        // independent indexing: walk cells, not the pixel mask
        for c in 0..2 {
            for cy in 0..4 {
                for cx in 0..4 {
                    let masked = half.masked[cy * 4 + cx];
                    for y in 2 * cy..2 * cy + 2 {
                        for x in 2 * cx..2 * cx + 2 {
                            let i = (c * 8 + y) * 8 + x;
                            let expect = if masked { [0.1, 0.9][c] } else { img.data()[i] };
                            assert_eq!(out.data()[i].to_bits(), expect.to_bits());
                        }
                    }
                }
            }
        }
        assert!(matches!(
            apply_spatial_mask(&Tensor::<f64>::zeros(&[2, 8, 6]), &half, &[0.0, 0.0]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn token_lattice_size() {
        assert_eq!(token_count(128, 128, 4, 16, 2).unwrap(), 128);
        let m = make_spatial_spectral_mask(128, 128, 4, 16, 2, 0.75, 0).unwrap();
        assert_eq!(m.masked_count(), 96);
        assert!(matches!(token_count(30, 32, 4, 8, 2), Err(Error::Argument(_))));
        assert!(matches!(token_count(32, 32, 4, 8, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn mask_spec_serializes() {
        let m = make_spatial_mask(16, 16, 4, 0.75, 5).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: SpatialMaskSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn masked_count_invariant(h in 1usize..64, w in 1usize..64, p in 1usize..16, rho in 0.0f64..=1.0, seed in any::<u64>()) {
            prop_assume!(p <= h.min(w));
            let m = make_spatial_mask(h, w, p, rho, seed).unwrap();
            let cells = h.div_ceil(p) * w.div_ceil(p);
            prop_assert_eq!(m.cells(), cells);
            prop_assert_eq!(m.masked_count(), (rho * cells as f64).round() as usize);
            prop_assert_eq!(m.visible_cells().len() + m.masked_cells().len(), cells);
            prop_assert_eq!(make_spatial_mask(h, w, p, rho, seed).unwrap(), m);
        }

        #[test]
        fn spectral_count_invariant(cells in 1usize..6, p in 1usize..5, groups in 1usize..4, group in 1usize..3, rho in 0.0f64..=1.0, seed in any::<u64>()) {
            let side = cells * p;
            let m = make_spatial_spectral_mask(side, side, groups * group, p, group, rho, seed).unwrap();
            let n = cells * cells * groups;
            prop_assert_eq!(m.tokens(), n);
            prop_assert_eq!(m.masked_count(), (rho * n as f64).round() as usize);
        }
    }
}
