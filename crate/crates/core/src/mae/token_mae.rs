use std::rc::Rc;

use panfuse_autograd::nn::{uniform, LayerNorm, Linear};
use panfuse_autograd::optim::Adam;
use panfuse_autograd::{Graph, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{make_spatial_spectral_mask, token_count};
use crate::batch::GradAccumulator;
use crate::error::{argument, geometry};
use crate::raster::MsImage;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMaeConfig {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub group: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mask_ratio: f64,
}

impl TokenMaeConfig {
    pub fn new(bands: usize, height: usize, width: usize) -> Self {
        Self {
            bands,
            height,
            width,
            patch: 16,
            group: 2,
            dim: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            mask_ratio: 0.75,
        }
    }

    pub fn tokens(&self) -> Result<usize> {
        token_count(self.height, self.width, self.bands, self.patch, self.group)
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * self.group
    }

    pub fn validate(&self) -> Result<()> {
        self.tokens()?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(argument!("embedding width {} not divisible into {} heads", self.dim, self.heads));
        }
        if self.encoder_layers == 0 {
            return Err(argument!("token MAE needs at least one encoder layer"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(argument!("token pretraining needs a mask ratio in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, 4 * dim, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * dim, dim, true),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let dim = g.shape(x)[1];
        let dh = dim / self.heads;
        let n = self.norm1.forward(g, store, x);
        let qkv = self.qkv.forward(g, store, n);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * dh, dh);
            let k = g.slice(qkv, 1, dim + h * dh, dh);
            let v = g.slice(qkv, 1, 2 * dim + h * dh, dh);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = g.softmax_rows(scores);
            outs.push(g.matmul(att, v));
        }
        let cat = g.concat(&outs, 1);
        let attn = self.proj.forward(g, store, cat);
        let x = g.add(x, attn);
        let n = self.norm2.forward(g, store, x);
        let hdn = self.fc1.forward(g, store, n);
        let hdn = g.gelu(hdn);
        let mlp = self.fc2.forward(g, store, hdn);
        g.add(x, mlp)
    }
}

/// Plain-transformer masked autoencoder over (spatial cell, band group)
/// tokens.
#[derive(Debug)]
pub struct TokenMae<T> {
    pub config: TokenMaeConfig,
    pub store: ParamStore<T>,
    embed: Linear,
    pos: ParamId,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    decoder_embed: Linear,
    mask_token: ParamId,
    decoder_pos: ParamId,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNorm,
    head: Linear,
    patch_index: Rc<Vec<usize>>,
}

impl<T: Scalar> Clone for TokenMae<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            embed: self.embed.clone(),
            pos: self.pos.clone(),
            encoder: self.encoder.clone(),
            encoder_norm: self.encoder_norm.clone(),
            decoder_embed: self.decoder_embed.clone(),
            mask_token: self.mask_token.clone(),
            decoder_pos: self.decoder_pos.clone(),
            decoder: self.decoder.clone(),
            decoder_norm: self.decoder_norm.clone(),
            head: self.head.clone(),
            patch_index: self.patch_index.clone(),
        }
    }
}

/// Flat indices that gather a `[bands, h, w]` image into `[tokens, p*p*group]`
/// rows, token `cell * groups + group`.
pub fn patchify_index(h: usize, w: usize, bands: usize, p: usize, group: usize) -> Vec<usize> {
    let (gh, gw, groups) = (h / p, w / p, bands / group);
    let mut idx = Vec::with_capacity(h * w * bands);
    for cy in 0..gh {
        for cx in 0..gw {
            for gi in 0..groups {
                for b in 0..group {
                    for y in 0..p {
                        for x in 0..p {
                            idx.push(((gi * group + b) * h + cy * p + y) * w + cx * p + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

impl<T: Scalar> TokenMae<T> {
    pub fn new(config: TokenMaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.tokens()?;
        let d = config.dim;
        let embed = Linear::new(&mut store, &mut rng, "embed", config.token_len(), d, true);
        let pos = store.add("pos", uniform(&mut rng, &[n, d], 0.02));
        let encoder = (0..config.encoder_layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("encoder.{i}"), d, config.heads))
            .collect();
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", d);
        let decoder_embed = Linear::new(&mut store, &mut rng, "decoder.embed", d, d, true);
        let mask_token = store.add("decoder.mask_token", uniform(&mut rng, &[d], 0.02));
        let decoder_pos = store.add("decoder.pos", uniform(&mut rng, &[n, d], 0.02));
        let decoder = (0..config.decoder_layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("decoder.{i}"), d, config.heads))
            .collect();
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let head = Linear::new(&mut store, &mut rng, "decoder.head", d, config.token_len(), true);
        let patch_index = Rc::new(patchify_index(
            config.height,
            config.width,
            config.bands,
            config.patch,
            config.group,
        ));
        Ok(Self {
            config,
            store,
            embed,
            pos,
            encoder,
            encoder_norm,
            decoder_embed,
            mask_token,
            decoder_pos,
            decoder,
            decoder_norm,
            head,
            patch_index,
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [c.bands, c.height, c.width] {
            return Err(geometry!(
                "token MAE built for [{}, {}, {}], got {shape:?}",
                c.bands,
                c.height,
                c.width
            ));
        }
        Ok(())
    }

    pub fn patchify(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_image(g.shape(x))?;
        let n = self.config.tokens()?;
        Ok(g.gather(x, self.patch_index.clone(), &[n, self.config.token_len()]))
    }

    /// Encodes the token rows listed in `rows` (all rows for feature
    /// extraction, visible rows during pretraining).
    fn encode_rows(&self, g: &mut Graph<T>, tokens: Var, rows: Option<&[usize]>) -> Var {
        let e = self.embed.forward(g, &self.store, tokens);
        let pos = g.param(&self.store, self.pos);
        let mut h = g.add(e, pos);
        if let Some(rows) = rows {
            h = g.gather_rows(h, rows);
        }
        for block in &self.encoder {
            h = block.forward(g, &self.store, h);
        }
        self.encoder_norm.forward(g, &self.store, h)
    }

    /// Token features `[tokens, dim]` of an unmasked image.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let t = self.patchify(g, x)?;
        Ok(self.encode_rows(g, t, None))
    }

    pub fn masked_loss(&self, g: &mut Graph<T>, img: &Tensor<T>, mask_seed: u64) -> Result<Var> {
        let c = &self.config;
        let spec = make_spatial_spectral_mask(c.height, c.width, c.bands, c.patch, c.group, c.mask_ratio, mask_seed)?;
        let visible = spec.visible_tokens();
        let masked = spec.masked_tokens();
        if visible.is_empty() || masked.is_empty() {
            return Err(argument!(
                "mask ratio {} leaves {} visible and {} masked tokens",
                c.mask_ratio,
                visible.len(),
                masked.len()
            ));
        }
        let x = g.input(img.clone());
        let tokens = self.patchify(g, x)?;
        let latent = self.encode_rows(g, tokens, Some(&visible));
        let d = self.decoder_embed.forward(g, &self.store, latent);
        let token = g.param(&self.store, self.mask_token);
        let full = g.scatter_rows(d, token, &visible, spec.tokens());
        let pos = g.param(&self.store, self.decoder_pos);
        let mut h = g.add(full, pos);
        for block in &self.decoder {
            h = block.forward(g, &self.store, h);
        }
        let h = self.decoder_norm.forward(g, &self.store, h);
        let pred = self.head.forward(g, &self.store, h);
        let pred_m = g.gather_rows(pred, &masked);
        let target_m = g.gather_rows(tokens, &masked);
        Ok(g.mean_abs_diff(pred_m, target_m))
    }

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
                detail: format!("token MAE loss {loss}"),
            });
        }
        opt.step(&mut self.store, &acc.finish(batch.len()), lr);
        Ok(loss)
    }

    /// Mean absolute difference between the encoder features of `pred` and
    /// `gt`. The encoder is frozen in `g`; gradients reach `pred` only.
    pub fn consistency_loss(&self, g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        if g.shape(pred) != g.shape(gt) {
            return Err(geometry!(
                "prediction {:?} and reference {:?} differ in shape",
                g.shape(pred),
                g.shape(gt)
            ));
        }
        g.freeze(&self.store);
        let fp = self.features(g, pred)?;
        let fg = self.features(g, gt)?;
        Ok(g.mean_abs_diff(fp, fg))
    }
}

/// Feature-space consistency between two images under a frozen token MAE.
pub fn ss_consistency_loss<T: Scalar>(e_mae: &TokenMae<T>, pred: &MsImage<T>, gt: &MsImage<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.tensor().clone());
    let r = g.input(gt.tensor().clone());
    let loss = e_mae.consistency_loss(&mut g, p, r)?;
    Ok(g.value(loss).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::store_fingerprint;
    use panfuse_autograd::gradcheck::{directional_derivative, relative_error_scalar};
    use panfuse_autograd::optim::AdamConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(bands: usize, side: usize) -> TokenMaeConfig {
        TokenMaeConfig {
            patch: 8,
            dim: 16,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
            ..TokenMaeConfig::new(bands, side, side)
        }
    }

    fn random_image(seed: u64, bands: usize, side: usize) -> MsImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MsImage::new(Tensor::from_fn(&[bands, side, side], |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn full_scale_lattice() {
        let cfg = TokenMaeConfig::new(4, 128, 128);
        assert_eq!(cfg.tokens().unwrap(), 128);
        assert!(TokenMaeConfig { patch: 24, ..cfg }.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        let idx = patchify_index(4, 4, 4, 2, 2);
        // token 1 = cell 0, second band group: bands 2..4 at rows 0..2, cols 0..2
        assert_eq!(&idx[8..16], &[32, 33, 36, 37, 48, 49, 52, 53]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn identical_inputs_score_zero() {
        let mae = TokenMae::<f64>::new(small(4, 16), 0).unwrap();
        let x = random_image(1, 4, 16);
        assert_eq!(ss_consistency_loss(&mae, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn consistency_never_touches_encoder() {
        let mae = TokenMae::<f64>::new(small(4, 16), 0).unwrap();
        let before = store_fingerprint(&mae.store);
        let (a, b) = (random_image(1, 4, 16), random_image(2, 4, 16));
        let mut g = Graph::new();
        let pa = g.input_with_grad(a.tensor().clone());
        let pb = g.input(b.tensor().clone());
        let loss = mae.consistency_loss(&mut g, pa, pb).unwrap();
        let grads = g.backward(loss);
        assert!(grads.for_store(&mae.store).iter().all(Option::is_none));
        assert!(grads.get(pa).is_some());
        assert_eq!(store_fingerprint(&mae.store), before);
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let mae = TokenMae::<f64>::new(small(4, 16), 3).unwrap();
        let gt = random_image(4, 4, 16);
        let pred = random_image(5, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = Tensor::<f64>::from_fn(&[4, 16, 16], |_| rng.random_range(-1.0..1.0));
        let f = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = g.input(t.clone());
            let r = g.input(gt.tensor().clone());
            let l = mae.consistency_loss(&mut g, p, r).unwrap();
            g.value(l).item()
        };
        // small step: |.| has kinks, stay well inside one linear piece
        let numeric = directional_derivative(f, pred.tensor(), &dir, 1e-7);
        let mut g = Graph::new();
        let p = g.input_with_grad(pred.tensor().clone());
        let r = g.input(gt.tensor().clone());
        let l = mae.consistency_loss(&mut g, p, r).unwrap();
        let analytic = g.backward(l).get(p).unwrap().dot(&dir);
        assert!(relative_error_scalar(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
    }

    #[test]
    fn shape_mismatch() {
        let mae = TokenMae::<f64>::new(small(4, 16), 0).unwrap();
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[4, 16, 16]));
        let b = g.input(Tensor::zeros(&[4, 16, 8]));
        assert!(matches!(mae.consistency_loss(&mut g, a, b), Err(Error::Geometry(_))));
    }

    #[test]
    fn pretrain_step_runs_and_moves_weights() {
        let mut mae = TokenMae::<f32>::new(small(4, 16), 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &mae.store);
        let before = store_fingerprint(&mae.store);
        let batch = vec![random_image(1, 4, 16).cast::<f32>(), random_image(2, 4, 16).cast::<f32>()];
        let loss = mae.pretrain_step(&mut opt, &batch, 0, 1e-3).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_ne!(store_fingerprint(&mae.store), before);
        assert!(matches!(mae.pretrain_step(&mut opt, &[], 0, 1e-3), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn consistency_is_a_pseudometric(sa in 0u64..1000, sb in 0u64..1000, sc in 0u64..1000) {
            let mae = TokenMae::<f64>::new(small(2, 16), 7).unwrap();
            let (a, b, c) = (random_image(sa, 2, 16), random_image(sb, 2, 16), random_image(sc, 2, 16));
            let ab = ss_consistency_loss(&mae, &a, &b).unwrap();
            let ba = ss_consistency_loss(&mae, &b, &a).unwrap();
            let bc = ss_consistency_loss(&mae, &b, &c).unwrap();
            let ac = ss_consistency_loss(&mae, &a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
