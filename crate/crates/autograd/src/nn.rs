//! Parameterized layers. Each layer only holds [`ParamId`]s; tensors live in
//! a [`ParamStore`] so a model can be checkpointed as one flat list.

use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Uniform `[-bound, bound)` initializer.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Randomly initialized conv (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[cout], bound)));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Stride-1 conv that keeps the spatial size.
    pub fn same<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, k, 1, k / 2, bias)
    }

    /// Stride-1 same-size conv with all weights (and bias) set to `fill`.
    pub fn constant<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        weight_fill: f64,
        bias_fill: Option<f64>,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::full(&[cout, cin, k, k], T::lit(weight_fill)),
        );
        let bias = bias_fill.map(|b| store.add(format!("{name}.bias"), Tensor::full(&[cout], T::lit(b))));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution without bias or padding; weight `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        g.conv_transpose2d(x, w, self.stride)
    }
}

/// `y = x W + b` on `[n, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        // Xavier-uniform
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, self.eps);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}
