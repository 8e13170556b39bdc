//! Model construction and checkpoint wiring shared by the trainers,
//! inference, and evaluation commands.

use anyhow::{bail, Result};
use rainfuse_core::cleannet::{CleanNet, CleanNetConfig};
use rainfuse_core::fusionnet::{ConvBackbone, FeatureExtractor, FusionNet, IdentityExtractor, RefinementNets};
use rainfuse_core::nn::ParamSet;
use rainfuse_core::rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ExtractorKind, Stage2Config};

/// Group names inside checkpoint archives.
pub const GROUP_CLEAN: &str = "clean";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_REFINE: &str = "refine";

pub struct CleanModel {
    pub ps: ParamSet<f32>,
    pub net: CleanNet,
}

/// Builds a fresh de-raining model. The reconstruction head starts zeroed,
/// so training begins from the identity mapping.
pub fn build_clean(arch: &CleanNetConfig, seed: u64) -> Result<CleanModel> {
    let mut ps = ParamSet::new();
    let mut r = rng::seeded(rng::derive_seed(seed, "stage1.init", 0));
    let net = CleanNet::new(arch, &mut ps, &mut r)?;
    net.zero_init_reconstruction(&mut ps);
    Ok(CleanModel { ps, net })
}

/// Rebuilds the de-raining model stored in a checkpoint.
pub fn clean_from_checkpoint(ckpt: &Checkpoint) -> Result<CleanModel> {
    if ckpt.header.kind != "clean" {
        bail!("expected a stage-1 checkpoint, found kind {:?}", ckpt.header.kind);
    }
    let mut model = build_clean(&ckpt.header.config.stage1.arch, ckpt.header.config.seed)?;
    ckpt.apply_group(GROUP_CLEAN, &mut model.ps)?;
    Ok(model)
}

/// The stage-2 model: the fusion operator and the refinement networks live
/// in separate parameter sets so their optimizers cannot touch each other.
pub struct FusionModel {
    pub fusion_ps: ParamSet<f32>,
    pub fusion: FusionNet,
    pub refine_ps: ParamSet<f32>,
    pub refine: RefinementNets,
}

/// Builds a fresh fusion model. Both refinement output heads start zeroed,
/// pinning the untrained adjustment and balance maps to the neutral 0.5.
pub fn build_fusion(seed: u64) -> FusionModel {
    let mut fusion_ps = ParamSet::new();
    let mut r = rng::seeded(rng::derive_seed(seed, "stage2.init.fusion", 0));
    let fusion = FusionNet::new(&mut fusion_ps, &mut r);
    let mut refine_ps = ParamSet::new();
    let mut r = rng::seeded(rng::derive_seed(seed, "stage2.init.refine", 0));
    let refine = RefinementNets::new(&mut refine_ps, &mut r);
    refine.zero_init_outputs(&mut refine_ps);
    FusionModel { fusion_ps, fusion, refine_ps, refine }
}

/// Rebuilds the fusion model stored in a checkpoint.
pub fn fusion_from_checkpoint(ckpt: &Checkpoint) -> Result<FusionModel> {
    if ckpt.header.kind != "fusion" {
        bail!("expected a stage-2 checkpoint, found kind {:?}", ckpt.header.kind);
    }
    let mut model = build_fusion(ckpt.header.config.seed);
    ckpt.apply_group(GROUP_FUSION, &mut model.fusion_ps)?;
    ckpt.apply_group(GROUP_REFINE, &mut model.refine_ps)?;
    Ok(model)
}

/// Instantiates the configured frozen feature extractor.
pub fn build_extractor(cfg: &Stage2Config) -> Box<dyn FeatureExtractor> {
    match cfg.extractor {
        ExtractorKind::Identity => Box::new(IdentityExtractor),
        ExtractorKind::Conv => Box::new(ConvBackbone::random(cfg.backbone_seed)),
    }
}
