use std::rc::Rc;

use panfuse_autograd::nn::Conv2d;
use panfuse_autograd::optim::Adam;
use panfuse_autograd::{Graph, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::make_spatial_mask;
use crate::batch::GradAccumulator;
use crate::error::{argument, geometry};
use crate::raster::MsImage;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvMaeConfig {
    pub bands: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub patch: usize,
    pub mask_ratio: f64,
}

impl ConvMaeConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            width: 32,
            encoder_blocks: 4,
            decoder_blocks: 2,
            patch: 8,
            mask_ratio: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands < 2 || self.width == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 || self.patch == 0 {
            return Err(argument!("invalid conv MAE configuration {self:?}"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(argument!(
                "pretraining needs a mask ratio in (0, 1], got {}",
                self.mask_ratio
            ));
        }
        Ok(())
    }
}

/// Stack of stride-1 3x3 conv + GELU blocks, `bands -> width` channels.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub convs: Vec<Conv2d>,
    pub bands: usize,
    pub width: usize,
}

impl ConvEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        bands: usize,
        width: usize,
        blocks: usize,
    ) -> Self {
        let convs = (0..blocks)
            .map(|i| {
                let cin = if i == 0 { bands } else { width };
                Conv2d::same(store, rng, &format!("{prefix}{i}"), cin, width, 3, true)
            })
            .collect();
        Self { convs, bands, width }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.bands {
            return Err(geometry!("encoder expects {} bands, got shape {shape:?}", self.bands));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.gelu(h);
        }
        Ok(h)
    }
}

/// Convolutional masked autoencoder over whole images.
#[derive(Debug)]
pub struct ConvMae<T> {
    pub config: ConvMaeConfig,
    pub store: ParamStore<T>,
    pub encoder: ConvEncoder,
    pub decoder: Vec<Conv2d>,
    pub mask_token: ParamId,
}

impl<T: Scalar> Clone for ConvMae<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            mask_token: self.mask_token.clone(),
        }
    }
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl<T: Scalar> ConvMae<T> {
    pub fn new(config: ConvMaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(
            &mut store,
            &mut rng,
            ENCODER_PREFIX,
            config.bands,
            config.width,
            config.encoder_blocks,
        );
        let decoder = (0..config.decoder_blocks)
            .map(|i| {
                let cout = if i + 1 == config.decoder_blocks { config.bands } else { config.width };
                Conv2d::same(&mut store, &mut rng, &format!("decoder.{i}"), config.width, cout, 3, true)
            })
            .collect();
        let mask_token = store.add("mask_token", Tensor::full(&[config.bands], T::lit(0.5)));
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            mask_token,
        })
    }

    /// Encoder features `[width, h, w]` of an unmasked image.
    pub fn encode(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let x = g.input(h.clone());
        let f = self.encoder.forward(&mut g, &self.store, x)?;
        Ok(g.value(f).clone())
    }

    /// Decoder output for an image whose `pixel_mask` pixels are replaced by
    /// the mask token.
    pub fn reconstruct(&self, g: &mut Graph<T>, x: Var, pixel_mask: Rc<Vec<bool>>) -> Result<Var> {
        let token = g.param(&self.store, self.mask_token);
        let masked = g.masked_fill(x, token, pixel_mask);
        let mut h = self.encoder.forward(g, &self.store, masked)?;
        let last = self.decoder.len() - 1;
        for (i, conv) in self.decoder.iter().enumerate() {
            h = conv.forward(g, &self.store, h);
            if i < last {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    /// Mean absolute reconstruction error over masked pixels only.
    pub fn masked_loss(&self, g: &mut Graph<T>, img: &Tensor<T>, mask_seed: u64) -> Result<Var> {
        let (c, h, w) = img.dims3();
        let spec = make_spatial_mask(h, w, self.config.patch.min(h.min(w)), self.config.mask_ratio, mask_seed)?;
        let pm = spec.pixel_mask();
        if !pm.iter().any(|&m| m) {
            return Err(argument!("mask selects no pixels on a {h}x{w} image"));
        }
        let full: Vec<bool> = (0..c).flat_map(|_| pm.iter().copied()).collect();
        let x = g.input(img.clone());
        let out = self.reconstruct(g, x, Rc::new(pm))?;
        Ok(g.masked_mean_abs_diff(out, x, Rc::new(full)))
    }

    /// One Adam step on the mean masked loss over `batch`. Image `i` uses
    /// mask seed `mask_seed + i`.
    pub fn pretrain_step(&mut self, opt: &mut Adam<T>, batch: &[MsImage<T>], mask_seed: u64, lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(argument!("empty pretraining batch"));
        }
        let mut acc = GradAccumulator::new(&self.store);
        let mut total = 0.0;
        for (i, img) in batch.iter().enumerate() {
            let mut g = Graph::new();
            let loss = self.masked_loss(&mut g, img.tensor(), mask_seed.wrapping_add(i as u64))?;
            total += g.value(loss).item().as_f64();
            acc.add(g.backward(loss).for_store(&self.store));
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: opt.steps(),
                detail: format!("conv MAE loss {loss}"),
            });
        }
        opt.step(&mut self.store, &acc.finish(batch.len()), lr);
        Ok(loss)
    }
}
