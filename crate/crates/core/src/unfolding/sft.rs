use panfuse_autograd::nn::Conv2d;
use panfuse_autograd::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::geometry;
use crate::{Result, Scalar};

const AMP_EPS: f64 = 1e-8;

/// Spatial-frequency transformation: a spatial conv branch and a Fourier
/// branch that edits amplitude and phase, fused and then modulated
/// per pixel and channel by `gamma(F_p)` and `beta(F_p)`.
#[derive(Clone, Debug)]
pub struct SftBlock {
    pub spatial1: Conv2d,
    pub spatial2: Conv2d,
    pub freq1: Conv2d,
    pub freq2: Conv2d,
    pub fuse: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub width: usize,
}

impl SftBlock {
    /// The second frequency conv starts at zero (the Fourier branch is then an
    /// exact polar round trip up to `AMP_EPS`), `gamma` outputs 1 and `beta`
    /// outputs 0 so the block initially ignores the PAN features.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize) -> Self {
        let f = width;
        Self {
            spatial1: Conv2d::same(store, rng, &format!("{name}.spatial1"), f, f, 3, true),
            spatial2: Conv2d::same(store, rng, &format!("{name}.spatial2"), f, f, 3, true),
            freq1: Conv2d::same(store, rng, &format!("{name}.freq1"), 2 * f, 2 * f, 1, true),
            freq2: Conv2d::constant(store, &format!("{name}.freq2"), 2 * f, 2 * f, 1, 0.0, Some(0.0)),
            fuse: Conv2d::same(store, rng, &format!("{name}.fuse"), 2 * f, f, 3, true),
            gamma: Conv2d::constant(store, &format!("{name}.gamma"), f, f, 3, 0.0, Some(1.0)),
            beta: Conv2d::constant(store, &format!("{name}.beta"), f, f, 3, 0.0, Some(0.0)),
            width,
        }
    }

    /// Fourier branch alone: orthonormal DFT, residual 1x1 convs over
    /// `[amplitude; phase]`, back to Cartesian form and inverse DFT.
    pub fn frequency<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (f, h, w) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let norm = ((h * w) as f64).sqrt();
        let z = g.dft2(x);
        let z = g.scale(z, 1.0 / norm);
        let re = g.slice(z, 0, 0, f);
        let im = g.slice(z, 0, f, f);
        let re2 = g.square(re);
        let im2 = g.square(im);
        let mag2 = g.add(re2, im2);
        let mag2 = g.add_const(mag2, AMP_EPS);
        let amp = g.sqrt(mag2);
        let phase = g.atan2(im, re);
        let polar = g.concat(&[amp, phase], 0);
        let t = self.freq1.forward(g, store, polar);
        let t = g.gelu(t);
        let t = self.freq2.forward(g, store, t);
        let polar = g.add(polar, t);
        let amp = g.slice(polar, 0, 0, f);
        let phase = g.slice(polar, 0, f, f);
        let c = g.cos(phase);
        let s = g.sin(phase);
        let re = g.mul(amp, c);
        let im = g.mul(amp, s);
        let z = g.concat(&[re, im], 0);
        let y = g.idft2_real(z);
        g.scale(y, norm)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var, pan_feat: Var) -> Result<Var> {
        let (fs, ps) = (g.shape(feat).to_vec(), g.shape(pan_feat).to_vec());
        if fs.len() != 3 || fs[0] != self.width || fs != ps {
            return Err(geometry!(
                "SFT expects matching [{}, h, w] inputs, got {fs:?} and {ps:?}",
                self.width
            ));
        }
        let s = self.spatial1.forward(g, store, feat);
        let s = g.gelu(s);
        let s = self.spatial2.forward(g, store, s);
        let fr = self.frequency(g, store, feat);
        let cat = g.concat(&[s, fr], 0);
        let fused = self.fuse.forward(g, store, cat);
        let gamma = self.gamma.forward(g, store, pan_feat);
        let beta = self.beta.forward(g, store, pan_feat);
        let scaled = g.mul(fused, gamma);
        Ok(g.add(scaled, beta))
    }
}
