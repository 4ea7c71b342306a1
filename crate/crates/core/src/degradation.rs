//! The network's degradation operator `DK` (learned strided convs), its
//! learned transpose, and a fixed Gaussian blur/decimate pair with an exact
//! adjoint for testing.

use panfuse_autograd::nn::{Conv2d, ConvTranspose2d};
use panfuse_autograd::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::geometry;
use crate::raster::reflect_index;
use crate::wald::{blur_decimate, DegradationConfig};
use crate::{Result, Scalar, Tensor};

/// A linear operator pair `A: R^{C,M,N} -> R^{C,M/s,N/s}` and its
/// (possibly learned) transpose.
pub trait DegradeOp<T: Scalar> {
    fn down(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn up(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

fn check_scale(shape: &[usize], channels: usize, s: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != channels {
        return Err(geometry!("expected [{channels}, h, w], got {shape:?}"));
    }
    if shape[1] % s != 0 || shape[2] % s != 0 {
        return Err(geometry!("{}x{} is not divisible by scale {s}", shape[1], shape[2]));
    }
    Ok(())
}

fn identity_kernel<T: Scalar>(c: usize, k: usize) -> Tensor<T> {
    let mut w = Tensor::zeros(&[c, c, k, k]);
    let mid = k / 2;
    for i in 0..c {
        w.data_mut()[((i * c + i) * k + mid) * k + mid] = T::one();
    }
    w
}

fn diagonal_block<T: Scalar>(c: usize, k: usize, value: f64) -> Tensor<T> {
    let mut w = Tensor::zeros(&[c, c, k, k]);
    for i in 0..c {
        let base = (i * c + i) * k * k;
        for v in &mut w.data_mut()[base..base + k * k] {
            *v = T::lit(value);
        }
    }
    w
}

/// 3x3 same-size conv followed by an `s x s` stride-`s` conv.
#[derive(Clone, Debug)]
pub struct LearnedDownOp {
    pub blur: Conv2d,
    pub sample: Conv2d,
    pub channels: usize,
    pub scale: usize,
}

impl LearnedDownOp {
    /// Identity blur and average-pool sampling.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, scale: usize) -> Self {
        let blur = store.add(format!("{name}.blur.weight"), identity_kernel(channels, 3));
        let sample = store.add(
            format!("{name}.sample.weight"),
            diagonal_block(channels, scale, 1.0 / (scale * scale) as f64),
        );
        Self::from_ids(blur, sample, channels, scale)
    }

    pub fn random<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        scale: usize,
    ) -> Self {
        let blur = Conv2d::new(store, rng, &format!("{name}.blur"), channels, channels, 3, 1, 1, false);
        let sample = Conv2d::new(store, rng, &format!("{name}.sample"), channels, channels, scale, scale, 0, false);
        Self {
            blur,
            sample,
            channels,
            scale,
        }
    }

    fn from_ids(blur: panfuse_autograd::ParamId, sample: panfuse_autograd::ParamId, channels: usize, scale: usize) -> Self {
        Self {
            blur: Conv2d {
                weight: blur,
                bias: None,
                stride: 1,
                pad: 1,
            },
            sample: Conv2d {
                weight: sample,
                bias: None,
                stride: scale,
                pad: 0,
            },
            channels,
            scale,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_scale(g.shape(x), self.channels, self.scale)?;
        let y = self.blur.forward(g, store, x);
        Ok(self.sample.forward(g, store, y))
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.freeze(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

/// `s x s` stride-`s` transposed conv followed by a 3x3 same-size conv.
#[derive(Clone, Debug)]
pub struct LearnedUpOp {
    pub spread: ConvTranspose2d,
    pub smooth: Conv2d,
    pub channels: usize,
    pub scale: usize,
}

impl LearnedUpOp {
    /// Replicating spread and identity smoothing. `bias` adds a zero-initialized
    /// bias to the smoothing conv.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, scale: usize, bias: bool) -> Self {
        let spread = store.add(format!("{name}.spread.weight"), diagonal_block(channels, scale, 1.0));
        let smooth = store.add(format!("{name}.smooth.weight"), identity_kernel(channels, 3));
        let bias = bias.then(|| store.add(format!("{name}.smooth.bias"), Tensor::zeros(&[channels])));
        Self {
            spread: ConvTranspose2d {
                weight: spread,
                stride: scale,
            },
            smooth: Conv2d {
                weight: smooth,
                bias,
                stride: 1,
                pad: 1,
            },
            channels,
            scale,
        }
    }

    pub fn random<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        scale: usize,
    ) -> Self {
        let bound = 1.0 / ((channels * scale * scale) as f64).sqrt();
        let spread = store.add(
            format!("{name}.spread.weight"),
            panfuse_autograd::nn::uniform(rng, &[channels, channels, scale, scale], bound),
        );
        let smooth = Conv2d::new(store, rng, &format!("{name}.smooth"), channels, channels, 3, 1, 1, false);
        Self {
            spread: ConvTranspose2d {
                weight: spread,
                stride: scale,
            },
            smooth,
            channels,
            scale,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_scale(g.shape(x), self.channels, 1)?;
        let y = self.spread.forward(g, store, x);
        Ok(self.smooth.forward(g, store, y))
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.freeze(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Learned down/up pair bound to its parameter store.
pub struct LearnedPair<'a, T> {
    pub down: &'a LearnedDownOp,
    pub up: &'a LearnedUpOp,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> DegradeOp<T> for LearnedPair<'_, T> {
    fn down(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.down.apply(self.store, x)
    }

    fn up(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.up.apply(self.store, y)
    }
}

/// Gaussian blur + stride decimation (as in the Wald simulator) and its exact
/// adjoint.
#[derive(Clone, Debug)]
pub struct FixedDegradeOracle {
    pub cfg: DegradationConfig,
}

impl FixedDegradeOracle {
    pub fn new(cfg: DegradationConfig) -> Self {
        Self { cfg }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        blur_decimate(x, &self.cfg)
    }

    /// Zero-fill upsampling followed by the transposed reflected blur.
    pub fn adjoint<T: Scalar>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, lh, lw) = y.dims3();
        let r = self.cfg.ratio;
        let (h, w) = (lh * r, lw * r);
        let taps = self.cfg.kernel();
        let half = (taps.len() / 2) as isize;
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut rows = vec![0.0; h * lw];
        for ci in 0..c {
            let plane = y.channel(ci);
            // transpose of the column pass, evaluated only at the sampled rows
            rows.iter_mut().for_each(|v| *v = 0.0);
            for ly in 0..lh {
                for (k, &wk) in taps.iter().enumerate() {
                    let src = reflect_index((ly * r) as isize + k as isize - half, h);
                    for lx in 0..lw {
                        rows[src * lw + lx] += wk * plane[ly * lw + lx].as_f64();
                    }
                }
            }
            let mut acc = vec![0.0; h * w];
            for yy in 0..h {
                for lx in 0..lw {
                    let v = rows[yy * lw + lx];
                    if v == 0.0 {
                        continue;
                    }
                    for (k, &wk) in taps.iter().enumerate() {
                        let src = reflect_index((lx * r) as isize + k as isize - half, w);
                        acc[yy * w + src] += wk * v;
                    }
                }
            }
            for (d, a) in out.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut().zip(acc) {
                *d = T::lit(a);
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> DegradeOp<T> for FixedDegradeOracle {
    fn down(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x)
    }

    fn up(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.adjoint(y)
    }
}
