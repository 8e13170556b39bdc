//! Layered run configuration.
//!
//! A run starts from a named profile's defaults, then applies the config
//! file's fields, then the `RAINFUSE_CHECKPOINT_DIR` environment variable,
//! then command-line flags. Later layers only touch fields they explicitly
//! set, so a profile never silently replaces a value the user wrote down.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rainfuse_core::cleannet::CleanNetConfig;
use rainfuse_core::fusionnet::FusionConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `checkpoint_dir` (flags still win).
pub const CHECKPOINT_DIR_ENV: &str = "RAINFUSE_CHECKPOINT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes-scale settings: tiny de-raining network, few iterations.
    Desk,
    /// Full-scale settings matching the published training recipe.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => bail!("unknown profile {other:?}, expected \"desk\" or \"paper\""),
        }
    }
}

/// Stage-1 (de-raining) training settings, architecture included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub iterations: u64,
    /// Patches per optimizer step.
    pub batch: usize,
    /// Side length of the square training crops.
    pub patch: usize,
    pub lr: f64,
    /// Decoupled weight decay of the stage-1 optimizer.
    pub weight_decay: f64,
    /// Steps between training-log records (the final step always logs).
    pub log_every: u64,
    /// Steps between periodic checkpoints (the final step always saves).
    pub checkpoint_every: u64,
    pub arch: CleanNetConfig,
}

/// Which frozen feature extractor measures information content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Measure on the raw luminance plane itself.
    Identity,
    /// Measure on the five-stage convolutional backbone's features.
    Conv,
}

/// Stage-2 (fusion + refinement) training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: u64,
    pub lr_fusion: f64,
    pub lr_refine: f64,
    /// Weight decay shared by both stage-2 optimizers.
    pub weight_decay: f64,
    pub fusion: FusionConfig,
    pub extractor: ExtractorKind,
    /// Seed for the deterministic random-weights backbone when no
    /// pretrained blobs are supplied.
    pub backbone_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub profile: Profile,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub manifest: PathBuf,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl AppConfig {
    pub fn profile_defaults(profile: Profile) -> Self {
        let desk_arch = CleanNetConfig {
            base_channels: 16,
            attention_hidden: 16,
            num_experts: 8,
            num_moe_blocks: 1,
            num_transformer_blocks: 2,
            topk_fraction: 0.8,
            heads: 2,
        };
        match profile {
            Profile::Desk => AppConfig {
                profile,
                seed: 7,
                checkpoint_dir: PathBuf::from("checkpoints"),
                manifest: PathBuf::from("data/manifest.jsonl"),
                stage1: Stage1Config {
                    iterations: 2000,
                    batch: 2,
                    patch: 64,
                    lr: 2e-4,
                    weight_decay: 0.0,
                    log_every: 25,
                    checkpoint_every: 500,
                    arch: desk_arch,
                },
                stage2: Stage2Config {
                    epochs: 50,
                    lr_fusion: 1e-4,
                    lr_refine: 3e-4,
                    weight_decay: 3e-4,
                    fusion: FusionConfig::default(),
                    extractor: ExtractorKind::Identity,
                    backbone_seed: 17,
                },
            },
            Profile::Paper => AppConfig {
                profile,
                seed: 7,
                checkpoint_dir: PathBuf::from("checkpoints"),
                manifest: PathBuf::from("data/manifest.jsonl"),
                stage1: Stage1Config {
                    iterations: 300_000,
                    batch: 8,
                    patch: 64,
                    lr: 1e-4,
                    weight_decay: 0.0,
                    log_every: 100,
                    checkpoint_every: 5000,
                    arch: CleanNetConfig::default(),
                },
                stage2: Stage2Config {
                    epochs: 500,
                    lr_fusion: 1e-4,
                    lr_refine: 3e-4,
                    weight_decay: 3e-4,
                    fusion: FusionConfig::default(),
                    extractor: ExtractorKind::Conv,
                    backbone_seed: 17,
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.arch.validate().map_err(|e| anyhow::anyhow!("stage1 architecture: {e}"))?;
        if self.stage1.batch == 0 {
            bail!("stage1.batch must be >= 1");
        }
        if self.stage1.patch < rainfuse_core::cleannet::MIN_SIDE {
            bail!(
                "stage1.patch must be >= {} (the de-raining network's minimum side), got {}",
                rainfuse_core::cleannet::MIN_SIDE,
                self.stage1.patch
            );
        }
        if self.stage1.log_every == 0 || self.stage1.checkpoint_every == 0 {
            bail!("stage1.log_every and stage1.checkpoint_every must be >= 1");
        }
        for (name, lr) in [
            ("stage1.lr", self.stage1.lr),
            ("stage2.lr_fusion", self.stage2.lr_fusion),
            ("stage2.lr_refine", self.stage2.lr_refine),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                bail!("{name} must be a positive finite number, got {lr}");
            }
        }
        if self.stage1.weight_decay < 0.0 || self.stage2.weight_decay < 0.0 {
            bail!("weight decay must be non-negative");
        }
        let f = &self.stage2.fusion;
        if f.cascaded_stages == 0 {
            bail!("stage2.fusion.cascaded_stages must be >= 1");
        }
        // adjust_iterations = 0 is allowed: it trains the fusion operator alone.
        if !(f.alpha > 0.0) || !(f.beta > 0.0) || !(f.eps_div > 0.0) {
            bail!("stage2 fusion alpha, beta, and eps_div must be positive");
        }
        Ok(())
    }
}

/// A sparse set of overrides; only the fields present are applied.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub stage1: Stage1Overlay,
    #[serde(default)]
    pub stage2: Stage2Overlay,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Overlay {
    pub iterations: Option<u64>,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub log_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub channels: Option<usize>,
    pub gate_hidden: Option<usize>,
    pub experts: Option<usize>,
    pub mixture_blocks: Option<usize>,
    pub encoder_blocks: Option<usize>,
    pub topk_fraction: Option<f64>,
    pub heads: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Overlay {
    pub epochs: Option<u64>,
    pub lr_fusion: Option<f64>,
    pub lr_refine: Option<f64>,
    pub weight_decay: Option<f64>,
    pub stages: Option<usize>,
    pub refinements: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub eps_div: Option<f64>,
    pub extractor: Option<ExtractorKind>,
    pub backbone_seed: Option<u64>,
}

impl ConfigOverlay {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&self, cfg: &mut AppConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.checkpoint_dir {
            cfg.checkpoint_dir = v.clone();
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        let s1 = &mut cfg.stage1;
        let o1 = &self.stage1;
        if let Some(v) = o1.iterations {
            s1.iterations = v;
        }
        if let Some(v) = o1.batch {
            s1.batch = v;
        }
        if let Some(v) = o1.patch {
            s1.patch = v;
        }
        if let Some(v) = o1.lr {
            s1.lr = v;
        }
        if let Some(v) = o1.weight_decay {
            s1.weight_decay = v;
        }
        if let Some(v) = o1.log_every {
            s1.log_every = v;
        }
        if let Some(v) = o1.checkpoint_every {
            s1.checkpoint_every = v;
        }
        if let Some(v) = o1.channels {
            s1.arch.base_channels = v;
        }
        if let Some(v) = o1.gate_hidden {
            s1.arch.attention_hidden = v;
        }
        if let Some(v) = o1.experts {
            s1.arch.num_experts = v;
        }
        if let Some(v) = o1.mixture_blocks {
            s1.arch.num_moe_blocks = v;
        }
        if let Some(v) = o1.encoder_blocks {
            s1.arch.num_transformer_blocks = v;
        }
        if let Some(v) = o1.topk_fraction {
            s1.arch.topk_fraction = v;
        }
        if let Some(v) = o1.heads {
            s1.arch.heads = v;
        }
        let s2 = &mut cfg.stage2;
        let o2 = &self.stage2;
        if let Some(v) = o2.epochs {
            s2.epochs = v;
        }
        if let Some(v) = o2.lr_fusion {
            s2.lr_fusion = v;
        }
        if let Some(v) = o2.lr_refine {
            s2.lr_refine = v;
        }
        if let Some(v) = o2.weight_decay {
            s2.weight_decay = v;
        }
        if let Some(v) = o2.stages {
            s2.fusion.cascaded_stages = v;
        }
        if let Some(v) = o2.refinements {
            s2.fusion.adjust_iterations = v;
        }
        if let Some(v) = o2.alpha {
            s2.fusion.alpha = v;
        }
        if let Some(v) = o2.beta {
            s2.fusion.beta = v;
        }
        if let Some(v) = o2.eps_div {
            s2.fusion.eps_div = v;
        }
        if let Some(v) = o2.extractor {
            s2.extractor = v;
        }
        if let Some(v) = o2.backbone_seed {
            s2.backbone_seed = v;
        }
    }
}

/// Resolves the effective configuration. Profile choice: the flag overlay's
/// `profile` wins, then the file's, then desk. Values then layer as
/// profile defaults -> file -> environment -> flags.
pub fn resolve(
    config_path: Option<&Path>,
    flags: &ConfigOverlay,
    env_checkpoint_dir: Option<&str>,
) -> Result<AppConfig> {
    let file = match config_path {
        Some(p) => Some(ConfigOverlay::from_toml_file(p)?),
        None => None,
    };
    let profile = flags
        .profile
        .or(file.as_ref().and_then(|f| f.profile))
        .unwrap_or(Profile::Desk);
    let mut cfg = AppConfig::profile_defaults(profile);
    if let Some(file) = &file {
        file.apply(&mut cfg);
    }
    if let Some(dir) = env_checkpoint_dir {
        cfg.checkpoint_dir = PathBuf::from(dir);
    }
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
