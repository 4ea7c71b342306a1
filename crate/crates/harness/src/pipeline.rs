//! The training stages: conv MAE pretraining, token MAE pretraining and
//! unfolding-network training, each producing a checkpoint directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use panfuse_autograd::optim::{Adam, AdamConfig};
use panfuse_core::mae::{ConvMae, TokenMae};
use panfuse_core::raster::MsImage;
use panfuse_core::unfolding::{train_step, UnfoldingModel};
use panfuse_core::wald::SamplePair;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{self, CheckpointInfo, CheckpointKind, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{training_patches, verify_manifest};
use crate::error::{HarnessError, Result};
use crate::runlog::EventLog;

pub const STAGE1_DIR: &str = "stage1";
pub const STAGE2_DIR: &str = "stage2";
pub const MODEL_DIR: &str = "model";
pub const LOG_DIR: &str = "logs";

pub fn stage1_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(STAGE1_DIR)
}

pub fn stage2_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(STAGE2_DIR)
}

pub fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(MODEL_DIR)
}

pub fn log_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.run_dir.join(LOG_DIR).join(format!("{name}.jsonl"))
}

fn info(cfg: &RunConfig, kind: CheckpointKind, step: u64, epoch: u64, data: &str, provenance: BTreeMap<String, String>) -> CheckpointInfo {
    CheckpointInfo {
        kind,
        config_hash: cfg.hash(),
        config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        step,
        epoch,
        data_manifest_sha256: data.to_string(),
        provenance,
    }
}

/// Order of sample indices for one pass, reproducible from `(seed, pass)`.
fn shuffled(n: usize, seed: u64, pass: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ pass.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    idx
}

/// Mean of the first and last ten entries.
pub fn smoothed_ends(curve: &[f64]) -> (f64, f64) {
    let w = curve.len().clamp(1, 10);
    let head = curve.iter().take(w).sum::<f64>() / w as f64;
    let tail = curve.iter().rev().take(w).sum::<f64>() / w as f64;
    (head, tail)
}

/// Batches of ground-truth patches, reshuffled after every pass.
fn pretrain_batches(images: &[MsImage<f32>], batch: usize, steps: u64, seed: u64) -> impl Iterator<Item = Vec<MsImage<f32>>> + '_ {
    let per_pass = images.len().div_ceil(batch) as u64;
    (0..steps).map(move |s| {
        let order = shuffled(images.len(), seed, s / per_pass);
        let start = (s % per_pass) as usize * batch;
        order[start..(start + batch).min(images.len())].iter().map(|&i| images[i].clone()).collect()
    })
}

fn gt_images(cfg: &RunConfig) -> Result<Vec<MsImage<f32>>> {
    let patches = training_patches(cfg)?;
    if patches.is_empty() {
        return Err(HarnessError::Dependency("the train split has no patches".into()));
    }
    Ok(patches.into_iter().map(|p| p.gt).collect())
}

trait Pretrain {
    fn step(&mut self, opt: &mut Adam<f32>, batch: &[MsImage<f32>], mask_seed: u64, lr: f64) -> Result<f64>;
    fn store(&self) -> &panfuse_autograd::ParamStore<f32>;
}

impl Pretrain for ConvMae<f32> {
    fn step(&mut self, opt: &mut Adam<f32>, batch: &[MsImage<f32>], mask_seed: u64, lr: f64) -> Result<f64> {
        Ok(self.pretrain_step(opt, batch, mask_seed, lr)?)
    }
    fn store(&self) -> &panfuse_autograd::ParamStore<f32> {
        &self.store
    }
}

impl Pretrain for TokenMae<f32> {
    fn step(&mut self, opt: &mut Adam<f32>, batch: &[MsImage<f32>], mask_seed: u64, lr: f64) -> Result<f64> {
        Ok(self.pretrain_step(opt, batch, mask_seed, lr)?)
    }
    fn store(&self) -> &panfuse_autograd::ParamStore<f32> {
        &self.store
    }
}

fn run_pretraining<M: Pretrain>(cfg: &RunConfig, model: &mut M, kind: CheckpointKind, tag: &str, out: &Path) -> Result<CheckpointMeta> {
    let manifest = verify_manifest(&cfg.data_dir)?;
    let images = gt_images(cfg)?;
    let seed = cfg.stage_seed(tag);
    let mut opt = Adam::new(AdamConfig::default(), model.store());
    let mut log = EventLog::create(&log_path(cfg, tag))?;
    log.event(json!({"event": "start", "stage": tag, "config_hash": cfg.hash(), "images": images.len(), "data_manifest_sha256": manifest.sha256}))?;
    let mut curve = Vec::with_capacity(cfg.pretrain_steps as usize);
    for (s, batch) in pretrain_batches(&images, cfg.batch, cfg.pretrain_steps, seed).enumerate() {
        let loss = model.step(&mut opt, &batch, seed.wrapping_add(s as u64), cfg.pretrain_lr)?;
        log.event(json!({"event": "step", "step": s + 1, "loss": loss, "lr": cfg.pretrain_lr}))?;
        curve.push(loss);
    }
    let per_pass = images.len().div_ceil(cfg.batch) as u64;
    let epochs = cfg.pretrain_steps.div_ceil(per_pass);
    let meta = checkpoint::save(out, info(cfg, kind, cfg.pretrain_steps, epochs, &manifest.sha256, BTreeMap::new()), model.store(), &opt)?;
    let (first, last) = smoothed_ends(&curve);
    log.event(json!({"event": "done", "smoothed_initial_loss": first, "smoothed_final_loss": last, "checkpoint_hash": meta.checkpoint_hash}))?;
    log::info!("{tag}: loss {first:.5} -> {last:.5}, checkpoint {}", out.display());
    Ok(meta)
}

/// Stage 1: conv MAE with spatial masking on ground-truth training patches.
pub fn pretrain_spatial(cfg: &RunConfig, out: Option<&Path>) -> Result<CheckpointMeta> {
    let mut mae = ConvMae::<f32>::new(cfg.conv_mae_config(), cfg.stage_seed("cmae-init"))?;
    run_pretraining(cfg, &mut mae, CheckpointKind::ConvMae, "pretrain_spatial", out.unwrap_or(&stage1_dir(cfg)))
}

/// Stage 2: token MAE with joint spatial-spectral masking.
pub fn pretrain_spectral(cfg: &RunConfig, out: Option<&Path>) -> Result<CheckpointMeta> {
    let mut mae = TokenMae::<f32>::new(cfg.token_mae_config(), cfg.stage_seed("tmae-init"))?;
    run_pretraining(cfg, &mut mae, CheckpointKind::TokenMae, "pretrain_spectral", out.unwrap_or(&stage2_dir(cfg)))
}

pub fn load_conv_mae(cfg: &RunConfig, dir: &Path) -> Result<(ConvMae<f32>, CheckpointMeta)> {
    let loaded = checkpoint::load::<f32>(dir, CheckpointKind::ConvMae)?;
    let mut mae = ConvMae::<f32>::new(cfg.conv_mae_config(), 0)?;
    loaded.restore(&mut mae.store)?;
    Ok((mae, loaded.meta))
}

pub fn load_token_mae(cfg: &RunConfig, dir: &Path) -> Result<(TokenMae<f32>, CheckpointMeta)> {
    let loaded = checkpoint::load::<f32>(dir, CheckpointKind::TokenMae)?;
    let mut mae = TokenMae::<f32>::new(cfg.token_mae_config(), 0)?;
    loaded.restore(&mut mae.store)?;
    Ok((mae, loaded.meta))
}

/// Rebuilds the unfolding network recorded in a checkpoint.
pub fn load_unfolding(dir: &Path) -> Result<(UnfoldingModel<f32>, CheckpointMeta, Adam<f32>)> {
    let loaded = checkpoint::load::<f32>(dir, CheckpointKind::Unfolding)?;
    let text: String = loaded.meta.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let cfg = RunConfig::parse(&text)?;
    if cfg.hash() != loaded.meta.config_hash {
        return Err(HarnessError::Checkpoint(format!("{}: embedded config does not match its hash", dir.display())));
    }
    let mut model = UnfoldingModel::<f32>::new(cfg.unfolding_config(), 0)?;
    loaded.restore(&mut model.store)?;
    let opt = loaded.optimizer();
    Ok((model, loaded.meta, opt))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stage-1 checkpoint; defaults to `<run_dir>/stage1`.
    pub stage1: Option<PathBuf>,
    /// Stage-2 checkpoint; defaults to `<run_dir>/stage2`.
    pub stage2: Option<PathBuf>,
    /// Output directory; defaults to `<run_dir>/model`.
    pub out: Option<PathBuf>,
    /// Accept pretrained checkpoints produced under another config hash.
    pub allow_mixed_config: bool,
    /// Log file stem; defaults to `train`.
    pub log_name: Option<String>,
}

fn check_same_run(cfg: &RunConfig, meta: &CheckpointMeta, data: &str, what: &str, allow: bool) -> Result<()> {
    if allow {
        return Ok(());
    }
    if meta.config_hash != cfg.hash() {
        return Err(HarnessError::MixedConfig(format!(
            "{what} was produced with config {} but this run has config {}",
            meta.config_hash,
            cfg.hash()
        )));
    }
    if meta.data_manifest_sha256 != data {
        return Err(HarnessError::MixedConfig(format!("{what} was trained on a different dataset")));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub meta: CheckpointMeta,
    pub model: UnfoldingModel<f32>,
    pub curve: Vec<f64>,
}

/// Stages 3 and 4: trains the unfolding network with the pretrained
/// encoder and/or the consistency loss as the ablation flags dictate.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let manifest = verify_manifest(&cfg.data_dir)?;
    let mut model = UnfoldingModel::<f32>::new(cfg.unfolding_config(), cfg.stage_seed("unfolding-init"))?;
    let mut provenance = BTreeMap::new();
    if cfg.use_mae_prior {
        let dir = opts.stage1.clone().unwrap_or_else(|| stage1_dir(cfg));
        let meta = checkpoint::read_meta(&dir).map_err(|_| {
            HarnessError::Dependency(format!(
                "stage-1 checkpoint {} is missing; run pretrain-spatial or set use_mae_prior = false",
                dir.display()
            ))
        })?;
        check_same_run(cfg, &meta, &manifest.sha256, "stage-1 checkpoint", opts.allow_mixed_config)?;
        let (mae, meta) = load_conv_mae(cfg, &dir)?;
        model.load_encoder(&mae)?;
        provenance.insert("stage1".to_string(), meta.checkpoint_hash);
    }
    let e_mae = if cfg.use_mae_loss && cfg.lambda > 0.0 {
        let dir = opts.stage2.clone().unwrap_or_else(|| stage2_dir(cfg));
        let meta = checkpoint::read_meta(&dir).map_err(|_| {
            HarnessError::Dependency(format!(
                "stage-2 checkpoint {} is missing; run pretrain-spectral or set use_mae_loss = false",
                dir.display()
            ))
        })?;
        check_same_run(cfg, &meta, &manifest.sha256, "stage-2 checkpoint", opts.allow_mixed_config)?;
        let (mae, meta) = load_token_mae(cfg, &dir)?;
        provenance.insert("stage2".to_string(), meta.checkpoint_hash);
        Some(mae)
    } else {
        None
    };

    let patches: Vec<SamplePair<f32>> = training_patches(cfg)?;
    if patches.is_empty() {
        return Err(HarnessError::Dependency("the train split has no patches".into()));
    }
    let schedule = cfg.schedule();
    let seed = cfg.stage_seed("train-batches");
    let mut opt = Adam::new(AdamConfig::default(), &model.store);
    let log_name = opts.log_name.clone().unwrap_or_else(|| "train".into());
    let mut log = EventLog::create(&log_path(cfg, &log_name))?;
    log.event(json!({
        "event": "start",
        "config_hash": cfg.hash(),
        "patches": patches.len(),
        "stages": cfg.stages,
        "use_mae_prior": cfg.use_mae_prior,
        "use_mae_loss": e_mae.is_some(),
        "provenance": provenance,
        "data_manifest_sha256": manifest.sha256,
    }))?;

    let mut curve = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut last_lr = schedule.lr_at(1);
    'outer: for e in 1..=cfg.epochs {
        epoch = e;
        let lr = schedule.lr_at(e);
        if lr != last_lr {
            log.event(json!({"event": "lr_decay", "epoch": e, "lr": lr, "previous_lr": last_lr}))?;
            last_lr = lr;
        }
        let order = shuffled(patches.len(), seed, e);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
            let batch: Vec<_> = chunk.iter().map(|&i| patches[i].clone()).collect();
            let terms = train_step(&mut model, &mut opt, &batch, e_mae.as_ref(), lr)?;
            step += 1;
            curve.push(terms.total);
            log.event(json!({
                "event": "step",
                "step": step,
                "epoch": e,
                "lr": lr,
                "loss": terms.total,
                "image_loss": terms.image,
                "consistency_loss": terms.consistency,
            }))?;
        }
    }
    let out = opts.out.clone().unwrap_or_else(|| model_dir(cfg));
    let meta = checkpoint::save(&out, info(cfg, CheckpointKind::Unfolding, step, epoch, &manifest.sha256, provenance), &model.store, &opt)?;
    let (first, last) = smoothed_ends(&curve);
    log.event(json!({
        "event": "done",
        "steps": step,
        "epochs": epoch,
        "smoothed_initial_loss": first,
        "smoothed_final_loss": last,
        "checkpoint_hash": meta.checkpoint_hash,
    }))?;
    log::info!("train: {step} steps, loss {first:.5} -> {last:.5}, checkpoint {}", out.display());
    Ok(TrainOutcome { meta, model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffles_are_reproducible_permutations() {
        let a = shuffled(20, 3, 1);
        assert_eq!(a, shuffled(20, 3, 1));
        assert_ne!(a, shuffled(20, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn smoothing_windows() {
        let curve: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(smoothed_ends(&curve), (4.5, 24.5));
        assert_eq!(smoothed_ends(&[2.0, 4.0]), (3.0, 3.0));
    }
}
