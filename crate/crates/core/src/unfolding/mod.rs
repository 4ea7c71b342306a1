//! The K-stage unfolded fusion network. Each stage runs a learned proximal
//! update `U = H + dec(SFT(E(H), F_p))` and a gradient step on the
//! H-subproblem through learned down/up convolutions.

mod hqs;
mod sft;
mod train;

use panfuse_autograd::nn::Conv2d;
use panfuse_autograd::{Graph, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{LearnedDownOp, LearnedUpOp};
use crate::error::{argument, geometry};
use crate::mae::{ConvEncoder, ConvMae, ENCODER_PREFIX};
use crate::raster::{bicubic_upsample, MsImage, PanImage};
use crate::{Result, Scalar, Tensor};

pub use hqs::{f2_gradient, f2_objective, hqs_h_step};
pub use sft::SftBlock;
pub use train::{batch_loss, composite_loss, image_loss, train_step, LossTerms, StepDecay};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnfoldingConfig {
    pub bands: usize,
    pub ratio: usize,
    pub stages: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    /// One proximal block reused by every stage.
    pub share_stage_weights: bool,
    /// One (down, up) pair reused by every stage.
    pub share_degradation: bool,
    pub freeze_encoder: bool,
    pub encoder_lr_scale: f64,
    pub lambda: f64,
    pub init_delta: f64,
    pub init_eta: f64,
}

impl UnfoldingConfig {
    pub fn new(bands: usize, ratio: usize) -> Self {
        Self {
            bands,
            ratio,
            stages: 4,
            width: 32,
            encoder_blocks: 4,
            share_stage_weights: false,
            share_degradation: true,
            freeze_encoder: false,
            encoder_lr_scale: 0.1,
            lambda: 1.0,
            init_delta: 0.1,
            init_eta: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands < 2 || self.ratio < 2 || self.width == 0 || self.encoder_blocks == 0 {
            return Err(argument!("invalid unfolding configuration {self:?}"));
        }
        if self.stages > 16 {
            return Err(argument!("{} stages is beyond the supported range", self.stages));
        }
        if !(self.init_delta > 0.0 && self.init_eta > 0.0) {
            return Err(argument!("initial step size and penalty must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.encoder_lr_scale >= 0.0) {
            return Err(argument!("lambda and encoder lr scale must be non-negative"));
        }
        Ok(())
    }
}

/// Inverse of softplus, so a raw parameter can be initialized to give `v`.
pub fn softplus_inverse(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per-stage step size and penalty, stored as raw values behind softplus so
/// both stay positive whatever the optimizer does.
#[derive(Clone, Copy, Debug)]
pub struct StageParams {
    pub delta_raw: ParamId,
    pub eta_raw: ParamId,
}

impl StageParams {
    pub fn delta<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        softplus(store.get(self.delta_raw).item().as_f64())
    }

    pub fn eta<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        softplus(store.get(self.eta_raw).item().as_f64())
    }

    pub fn set_delta<T: Scalar>(&self, store: &mut ParamStore<T>, raw: f64) {
        *store.get_mut(self.delta_raw) = Tensor::scalar(T::lit(raw));
    }
}

/// Proximal block of one stage.
#[derive(Clone, Debug)]
pub struct StageBlock {
    pub sft: SftBlock,
    pub dec_hidden: Conv2d,
    pub dec_out: Conv2d,
}

#[derive(Debug)]
pub struct UnfoldingModel<T> {
    pub config: UnfoldingConfig,
    pub store: ParamStore<T>,
    pub encoder: ConvEncoder,
    pub pan1: Conv2d,
    pub pan2: Conv2d,
    pub blocks: Vec<StageBlock>,
    pub degradation: Vec<(LearnedDownOp, LearnedUpOp)>,
    pub stage_params: Vec<StageParams>,
}

impl<T: Scalar> Clone for UnfoldingModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            pan1: self.pan1.clone(),
            pan2: self.pan2.clone(),
            blocks: self.blocks.clone(),
            degradation: self.degradation.clone(),
            stage_params: self.stage_params.clone(),
        }
    }
}

impl<T: Scalar> UnfoldingModel<T> {
    /// Fresh model; the encoder is randomly initialized until
    /// [`UnfoldingModel::load_encoder`] is called.
    pub fn new(config: UnfoldingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, f) = (config.bands, config.width);
        let encoder = ConvEncoder::new(&mut store, &mut rng, ENCODER_PREFIX, c, f, config.encoder_blocks);
        let pan1 = Conv2d::same(&mut store, &mut rng, "pan.0", 1, f, 3, true);
        let pan2 = Conv2d::same(&mut store, &mut rng, "pan.1", f, f, 3, true);
        let n_blocks = if config.share_stage_weights { 1 } else { config.stages };
        let blocks = (0..n_blocks)
            .map(|k| StageBlock {
                sft: SftBlock::new(&mut store, &mut rng, &format!("stage{k}.sft"), f),
                dec_hidden: Conv2d::same(&mut store, &mut rng, &format!("stage{k}.dec_hidden"), f, f, 3, true),
                dec_out: Conv2d::constant(&mut store, &format!("stage{k}.dec_out"), f, c, 3, 0.0, Some(0.0)),
            })
            .collect();
        let n_ops = if config.share_degradation { 1 } else { config.stages };
        let degradation = (0..n_ops)
            .map(|k| {
                (
                    LearnedDownOp::new(&mut store, &format!("hnet{k}.down"), c, config.ratio),
                    LearnedUpOp::new(&mut store, &format!("hnet{k}.up"), c, config.ratio, false),
                )
            })
            .collect();
        let stage_params = (0..config.stages)
            .map(|k| StageParams {
                delta_raw: store.add(
                    format!("stage{k}.delta_raw"),
                    Tensor::scalar(T::lit(softplus_inverse(config.init_delta))),
                ),
                eta_raw: store.add(
                    format!("stage{k}.eta_raw"),
                    Tensor::scalar(T::lit(softplus_inverse(config.init_eta))),
                ),
            })
            .collect();
        let mut model = Self {
            config,
            store,
            encoder,
            pan1,
            pan2,
            blocks,
            degradation,
            stage_params,
        };
        model.apply_encoder_lr();
        Ok(model)
    }

    fn apply_encoder_lr(&mut self) {
        let scale = if self.config.freeze_encoder { 0.0 } else { self.config.encoder_lr_scale };
        for conv in &self.encoder.convs {
            self.store.set_lr_scale(conv.weight, scale);
            if let Some(b) = conv.bias {
                self.store.set_lr_scale(b, scale);
            }
        }
    }

    /// Copies pretrained encoder weights from a conv MAE.
    pub fn load_encoder(&mut self, mae: &ConvMae<T>) -> Result<()> {
        if mae.config.bands != self.config.bands
            || mae.config.width != self.config.width
            || mae.config.encoder_blocks != self.config.encoder_blocks
        {
            return Err(geometry!(
                "pretrained encoder ({} bands, width {}, {} blocks) does not fit the model ({} bands, width {}, {} blocks)",
                mae.config.bands,
                mae.config.width,
                mae.config.encoder_blocks,
                self.config.bands,
                self.config.width,
                self.config.encoder_blocks
            ));
        }
        let copied = self.store.copy_prefixed(&mae.store, ENCODER_PREFIX, ENCODER_PREFIX);
        debug_assert_eq!(copied, 2 * self.config.encoder_blocks);
        Ok(())
    }

    fn block(&self, k: usize) -> &StageBlock {
        &self.blocks[if self.config.share_stage_weights { 0 } else { k }]
    }

    pub fn degradation_ops(&self, k: usize) -> &(LearnedDownOp, LearnedUpOp) {
        &self.degradation[if self.config.share_degradation { 0 } else { k }]
    }

    fn check_inputs(&self, lrms: &Tensor<T>, pan: &Tensor<T>) -> Result<()> {
        let (c, h, w) = lrms.dims3();
        let r = self.config.ratio;
        if c != self.config.bands {
            return Err(geometry!("model expects {} bands, got {c}", self.config.bands));
        }
        if pan.shape() != [1, h * r, w * r] {
            return Err(geometry!(
                "PAN {:?} does not match {h}x{w} MS at ratio {r}",
                pan.shape()
            ));
        }
        Ok(())
    }

    pub fn pan_features(&self, g: &mut Graph<T>, pan: Var) -> Var {
        let f = self.pan1.forward(g, &self.store, pan);
        let f = g.gelu(f);
        self.pan2.forward(g, &self.store, f)
    }

    /// `U = H + dec(SFT(E(H), F_p))`.
    pub fn unet_prox(&self, g: &mut Graph<T>, h: Var, pan_feat: Var, k: usize) -> Result<Var> {
        let block = self.block(k);
        let feat = self.encoder.forward(g, &self.store, h)?;
        let fused = block.sft.forward(g, &self.store, feat, pan_feat)?;
        let d = block.dec_hidden.forward(g, &self.store, fused);
        let d = g.gelu(d);
        let d = block.dec_out.forward(g, &self.store, d);
        Ok(g.add(h, d))
    }

    /// `H - delta [ up(down(H) - L) + eta (H - U) ]`.
    pub fn hnet_update(&self, g: &mut Graph<T>, h: Var, u: Var, l: Var, k: usize) -> Result<Var> {
        let (down, up) = self.degradation_ops(k);
        let params = self.stage_params[k];
        let dh = down.forward(g, &self.store, h)?;
        if g.shape(dh) != g.shape(l) {
            return Err(geometry!("DK H is {:?}, L is {:?}", g.shape(dh), g.shape(l)));
        }
        let residual = g.sub(dh, l);
        let back = up.forward(g, &self.store, residual)?;
        let diff = g.sub(h, u);
        let eta_raw = g.param(&self.store, params.eta_raw);
        let eta = g.softplus(eta_raw);
        let prox = g.mul_scalar(diff, eta);
        let grad = g.add(back, prox);
        let delta_raw = g.param(&self.store, params.delta_raw);
        let delta = g.softplus(delta_raw);
        let step = g.mul_scalar(grad, delta);
        Ok(g.sub(h, step))
    }

    /// Unclipped network output for one pair.
    pub fn forward_graph(&self, g: &mut Graph<T>, lrms: &MsImage<T>, pan: &PanImage<T>) -> Result<Var> {
        self.check_inputs(lrms.tensor(), pan.tensor())?;
        let h0 = bicubic_upsample(lrms, self.config.ratio)?;
        let mut h = g.input(h0.into_tensor());
        if self.config.stages == 0 {
            return Ok(h);
        }
        let l = g.input(lrms.tensor().clone());
        let p = g.input(pan.tensor().clone());
        let fp = self.pan_features(g, p);
        for k in 0..self.config.stages {
            let u = self.unet_prox(g, h, fp, k)?;
            h = self.hnet_update(g, h, u, l, k)?;
        }
        Ok(h)
    }

    /// Fused image, clipped to `[0, 1]`.
    pub fn fuse(&self, lrms: &MsImage<T>, pan: &PanImage<T>) -> Result<MsImage<T>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let out = self.forward_graph(&mut g, lrms, pan)?;
        let t = g.value(out).clone();
        if !t.is_finite() {
            return Err(crate::Error::Validation("network produced non-finite values".into()));
        }
        MsImage::from_clipped(t)
    }
}
