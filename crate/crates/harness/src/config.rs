//! Flat `key = value` run configuration.
//!
//! A file may start from a built-in profile (`profile = desk`) and override
//! any documented key. Unknown keys, duplicate keys and malformed values are
//! hard errors. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use panfuse_core::fingerprint::sha256_hex;
use panfuse_core::mae::{ConvMaeConfig, TokenMaeConfig};
use panfuse_core::unfolding::{StepDecay, UnfoldingConfig};
use panfuse_core::wald::DegradationConfig;

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = crate::HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(config_err!("unknown profile {other:?} (expected paper or desk)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        })
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "base profile the file overrides: paper or desk"),
    ("data_dir", "dataset root holding train/, test/ and full/"),
    ("run_dir", "directory receiving checkpoints, logs and reports"),
    ("bands", "number of MS bands C"),
    ("ratio", "PAN/MS resolution ratio r"),
    ("stages", "unfolding stage count K (0..=6)"),
    ("width", "feature width F of the conv MAE encoder and the unfolding network"),
    ("encoder_blocks", "conv blocks in the conv MAE encoder"),
    ("decoder_blocks", "conv blocks in the conv MAE decoder"),
    ("cmae_patch", "side of a masked cell for spatial masking"),
    ("mask_ratio_spatial", "fraction of masked cells when pretraining the conv MAE"),
    ("token_patch", "spatial side of a token MAE patch"),
    ("token_group", "bands per token MAE band group"),
    ("token_dim", "token MAE embedding width"),
    ("token_encoder_layers", "token MAE encoder depth"),
    ("token_decoder_layers", "token MAE decoder depth"),
    ("token_heads", "attention heads in the token MAE"),
    ("mask_ratio_spectral", "fraction of masked tokens when pretraining the token MAE"),
    ("optimizer", "optimizer name; only adam is implemented"),
    ("lr", "base learning rate of the unfolding network"),
    ("batch", "mini-batch size for every training stage"),
    ("epochs", "training epochs over the patch set"),
    ("max_steps", "hard cap on optimizer steps (0 = no cap)"),
    ("decay_every", "halve-style decay period in epochs (0 = constant rate)"),
    ("decay_factor", "learning-rate multiplier applied every decay period"),
    ("pretrain_steps", "optimizer steps for each MAE pretraining stage"),
    ("pretrain_lr", "learning rate for MAE pretraining"),
    ("seed", "master seed; every stage derives its own stream from it"),
    ("lambda", "weight of the spatial-spectral consistency loss"),
    ("use_mae_prior", "initialize the embedded encoder from the conv MAE checkpoint"),
    ("use_mae_loss", "add the token MAE consistency loss"),
    ("freeze_encoder", "keep the embedded encoder fixed while training"),
    ("encoder_lr_scale", "learning-rate multiplier of the embedded encoder"),
    ("share_degradation", "one learned down/up pair for all stages"),
    ("share_stage_weights", "one proximal block for all stages"),
    ("patch", "PAN side of training patches"),
    ("noise_std", "Gaussian noise added to simulated LRMS/PAN"),
    ("toy_train_scenes", "synthetic scenes in the train split"),
    ("toy_test_scenes", "synthetic scenes in the test split"),
    ("toy_full_scenes", "synthetic full-resolution acquisitions"),
    ("toy_scene_size", "side of a synthetic scene before simulation"),
];

/// Keys that locate files rather than change results; they are left out of
/// the config hash so the same experiment in another directory hashes alike.
const LOCATION_KEYS: &[&str] = &["data_dir", "run_dir"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub bands: usize,
    pub ratio: usize,
    pub stages: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub cmae_patch: usize,
    pub mask_ratio_spatial: f64,
    pub token_patch: usize,
    pub token_group: usize,
    pub token_dim: usize,
    pub token_encoder_layers: usize,
    pub token_decoder_layers: usize,
    pub token_heads: usize,
    pub mask_ratio_spectral: f64,
    pub optimizer: String,
    pub lr: f64,
    pub batch: usize,
    pub epochs: u64,
    pub max_steps: u64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub seed: u64,
    pub lambda: f64,
    pub use_mae_prior: bool,
    pub use_mae_loss: bool,
    pub freeze_encoder: bool,
    pub encoder_lr_scale: f64,
    pub share_degradation: bool,
    pub share_stage_weights: bool,
    pub patch: usize,
    pub noise_std: f64,
    pub toy_train_scenes: usize,
    pub toy_test_scenes: usize,
    pub toy_full_scenes: usize,
    pub toy_scene_size: usize,
}

impl RunConfig {
    /// Full-scale settings: Adam, lr 5e-4, batch 4, 1000 epochs, decay x0.5 every 200 epochs.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/paper"),
            bands: 4,
            ratio: 4,
            stages: 4,
            width: 32,
            encoder_blocks: 4,
            decoder_blocks: 2,
            cmae_patch: 8,
            mask_ratio_spatial: 0.75,
            token_patch: 16,
            token_group: 2,
            token_dim: 128,
            token_encoder_layers: 4,
            token_decoder_layers: 2,
            token_heads: 4,
            mask_ratio_spectral: 0.75,
            optimizer: "adam".into(),
            lr: 5e-4,
            batch: 4,
            epochs: 1000,
            max_steps: 0,
            decay_every: 200,
            decay_factor: 0.5,
            pretrain_steps: 20_000,
            pretrain_lr: 1e-3,
            seed: 0,
            lambda: 1.0,
            use_mae_prior: true,
            use_mae_loss: true,
            freeze_encoder: false,
            encoder_lr_scale: 0.1,
            share_degradation: true,
            share_stage_weights: false,
            patch: 128,
            noise_std: 0.0,
            toy_train_scenes: 16,
            toy_test_scenes: 4,
            toy_full_scenes: 4,
            toy_scene_size: 256,
        }
    }

    /// Laptop-scale settings on synthetic toy data (300 steps). The embedded
    /// encoder trains at the full rate: at 0.1x it falls behind a random
    /// encoder within 300 steps.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            data_dir: PathBuf::from("runs/desk/data"),
            run_dir: PathBuf::from("runs/desk"),
            width: 16,
            lr: 1e-3,
            epochs: 20,
            max_steps: 300,
            decay_every: 15,
            pretrain_steps: 200,
            encoder_lr_scale: 1.0,
            patch: 32,
            ..Self::paper()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parses config text. A `profile` line, wherever it appears, picks the
    /// base; every other line overrides it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {line:?}", no + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if seen.insert(k.clone(), no + 1).is_some() {
                return Err(config_err!("line {}: duplicate key {k:?}", no + 1));
            }
            pairs.push((no + 1, k, v));
        }
        let profile = match pairs.iter().find(|(_, k, _)| k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (no, k, v) in pairs {
            cfg.set(&k, &v).map_err(|e| config_err!("line {no}: {}", e.to_string().trim_start_matches("config: ")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(config_err!("{key}: expected a boolean, got {v:?}")),
            }
        }
        match key {
            "profile" => {
                let p: Profile = value.parse()?;
                if p != self.profile {
                    return Err(config_err!("profile must be selected before overrides"));
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "bands" => self.bands = num(key, value)?,
            "ratio" => self.ratio = num(key, value)?,
            "stages" => self.stages = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "encoder_blocks" => self.encoder_blocks = num(key, value)?,
            "decoder_blocks" => self.decoder_blocks = num(key, value)?,
            "cmae_patch" => self.cmae_patch = num(key, value)?,
            "mask_ratio_spatial" => self.mask_ratio_spatial = num(key, value)?,
            "token_patch" => self.token_patch = num(key, value)?,
            "token_group" => self.token_group = num(key, value)?,
            "token_dim" => self.token_dim = num(key, value)?,
            "token_encoder_layers" => self.token_encoder_layers = num(key, value)?,
            "token_decoder_layers" => self.token_decoder_layers = num(key, value)?,
            "token_heads" => self.token_heads = num(key, value)?,
            "mask_ratio_spectral" => self.mask_ratio_spectral = num(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "decay_every" => self.decay_every = num(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "use_mae_prior" => self.use_mae_prior = flag(key, value)?,
            "use_mae_loss" => self.use_mae_loss = flag(key, value)?,
            "freeze_encoder" => self.freeze_encoder = flag(key, value)?,
            "encoder_lr_scale" => self.encoder_lr_scale = num(key, value)?,
            "share_degradation" => self.share_degradation = flag(key, value)?,
            "share_stage_weights" => self.share_stage_weights = flag(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "toy_train_scenes" => self.toy_train_scenes = num(key, value)?,
            "toy_test_scenes" => self.toy_test_scenes = num(key, value)?,
            "toy_full_scenes" => self.toy_full_scenes = num(key, value)?,
            "toy_scene_size" => self.toy_scene_size = num(key, value)?,
            other => return Err(config_err!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| config_err!("override {o:?} is not key=value"))?;
            if k.trim() == "profile" {
                return Err(config_err!("profile cannot be overridden; put it in the config file"));
            }
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Canonical `(key, value)` listing in documented key order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| v.to_string();
        let f = |v: f64| format!("{v:?}");
        let values = [
            self.profile.to_string(),
            self.data_dir.display().to_string(),
            self.run_dir.display().to_string(),
            self.bands.to_string(),
            self.ratio.to_string(),
            self.stages.to_string(),
            self.width.to_string(),
            self.encoder_blocks.to_string(),
            self.decoder_blocks.to_string(),
            self.cmae_patch.to_string(),
            f(self.mask_ratio_spatial),
            self.token_patch.to_string(),
            self.token_group.to_string(),
            self.token_dim.to_string(),
            self.token_encoder_layers.to_string(),
            self.token_decoder_layers.to_string(),
            self.token_heads.to_string(),
            f(self.mask_ratio_spectral),
            self.optimizer.clone(),
            f(self.lr),
            self.batch.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.decay_every.to_string(),
            f(self.decay_factor),
            self.pretrain_steps.to_string(),
            f(self.pretrain_lr),
            self.seed.to_string(),
            f(self.lambda),
            b(self.use_mae_prior),
            b(self.use_mae_loss),
            b(self.freeze_encoder),
            f(self.encoder_lr_scale),
            b(self.share_degradation),
            b(self.share_stage_weights),
            self.patch.to_string(),
            f(self.noise_std),
            self.toy_train_scenes.to_string(),
            self.toy_test_scenes.to_string(),
            self.toy_full_scenes.to_string(),
            self.toy_scene_size.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Text form that parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 over every result-affecting key.
    pub fn hash(&self) -> String {
        let canonical: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| !LOCATION_KEYS.contains(k))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        sha256_hex(canonical.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("ratio", self.ratio),
            ("width", self.width),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("cmae_patch", self.cmae_patch),
            ("token_patch", self.token_patch),
            ("token_group", self.token_group),
            ("token_dim", self.token_dim),
            ("token_heads", self.token_heads),
            ("batch", self.batch),
            ("patch", self.patch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config_err!("{k} must be positive"));
            }
        }
        if self.stages > 6 {
            return Err(config_err!("stages must be in 0..=6, got {}", self.stages));
        }
        if self.bands < 2 {
            return Err(config_err!("bands must be at least 2"));
        }
        if self.optimizer != "adam" {
            return Err(config_err!("optimizer {:?} is not supported (only adam)", self.optimizer));
        }
        if self.patch % self.ratio != 0 {
            return Err(config_err!("patch {} is not a multiple of ratio {}", self.patch, self.ratio));
        }
        for (k, v) in [("mask_ratio_spatial", self.mask_ratio_spatial), ("mask_ratio_spectral", self.mask_ratio_spectral)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err!("{k} must lie in (0, 1], got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.decay_factor > 0.0) || !(self.noise_std >= 0.0) {
            return Err(config_err!("lambda, decay_factor and noise_std must be non-negative (decay_factor positive)"));
        }
        self.unfolding_config().validate()?;
        self.conv_mae_config().validate()?;
        self.token_mae_config().validate()?;
        Ok(())
    }

    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig { noise_std: self.noise_std, seed: self.seed, ..DegradationConfig::for_ratio(self.ratio) }
    }

    pub fn conv_mae_config(&self) -> ConvMaeConfig {
        ConvMaeConfig {
            bands: self.bands,
            width: self.width,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            patch: self.cmae_patch,
            mask_ratio: self.mask_ratio_spatial,
        }
    }

    /// The token MAE sees ground-truth training patches of side `patch`.
    pub fn token_mae_config(&self) -> TokenMaeConfig {
        TokenMaeConfig {
            patch: self.token_patch,
            group: self.token_group,
            dim: self.token_dim,
            encoder_layers: self.token_encoder_layers,
            decoder_layers: self.token_decoder_layers,
            heads: self.token_heads,
            mask_ratio: self.mask_ratio_spectral,
            ..TokenMaeConfig::new(self.bands, self.patch, self.patch)
        }
    }

    pub fn unfolding_config(&self) -> UnfoldingConfig {
        UnfoldingConfig {
            stages: self.stages,
            width: self.width,
            encoder_blocks: self.encoder_blocks,
            share_stage_weights: self.share_stage_weights,
            share_degradation: self.share_degradation,
            freeze_encoder: self.freeze_encoder,
            encoder_lr_scale: self.encoder_lr_scale,
            lambda: if self.use_mae_loss { self.lambda } else { 0.0 },
            ..UnfoldingConfig::new(self.bands, self.ratio)
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            every: (self.decay_every > 0).then_some(self.decay_every),
            factor: self.decay_factor,
        }
    }

    /// Stage-specific seeds derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let h = sha256_hex(format!("{}:{stage}", self.seed).as_bytes());
        u64::from_str_radix(&h[..16], 16).expect("hex digest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::paper(), RunConfig::desk()] {
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn paper_profile_values() {
        let p = RunConfig::paper();
        assert_eq!((p.lr, p.batch, p.epochs, p.decay_every, p.decay_factor), (5e-4, 4, 1000, 200, 0.5));
        assert_eq!(p.schedule().lr_at(201), 0.5 * p.schedule().lr_at(200));
        let d = RunConfig::desk();
        assert!(d.max_steps > 0 && d.max_steps <= 500);
        assert_eq!(d.batch, 4);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(RunConfig::parse("profile = desk\nlerning_rate = 1\n"), Err(crate::HarnessError::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("seed 1\n").is_err());
        assert!(RunConfig::parse("seed = x\n").is_err());
        assert!(RunConfig::parse("profile = laptop\n").is_err());
    }

    #[test]
    fn validation_errors() {
        assert!(RunConfig::parse("mask_ratio_spatial = 0\n").is_err());
        assert!(RunConfig::parse("mask_ratio_spectral = 0\n").is_err());
        assert!(RunConfig::parse("token_patch = 12\n").is_err());
        assert!(RunConfig::parse("patch = 30\n").is_err());
        assert!(RunConfig::parse("optimizer = sgd\n").is_err());
        assert!(RunConfig::parse("stages = 7\n").is_err());
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.run_dir = PathBuf::from("/elsewhere");
        b.data_dir = PathBuf::from("/data");
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn every_key_is_listed_and_settable() {
        let cfg = RunConfig::desk();
        let entries = cfg.entries();
        assert_eq!(entries.len(), KEYS.len());
        let mut scratch = cfg.clone();
        for (k, v) in entries {
            scratch.set(k, &v).unwrap();
        }
        assert_eq!(scratch, cfg);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::desk();
        cfg.apply_overrides(&["stages=2".into(), " seed = 5 ".into()]).unwrap();
        assert_eq!((cfg.stages, cfg.seed), (2, 5));
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["profile=paper".into()]).is_err());
    }
}
