//! Deterministic inference: de-rain the visible image, then run the staged
//! fuse-and-refine cascade on its luminance against the infrared plane.

use anyhow::{bail, Result};
use rainfuse_core::autodiff::Tape;
use rainfuse_core::fusionnet::{refine_step, FusionConfig, RefineStats};
use rainfuse_core::image::{rgb_to_ycbcr, with_luma, ycbcr_to_rgb, ColorSpace, Image};
use rainfuse_core::tensor::Tensor;

use crate::model::{CleanModel, FusionModel};

/// Runs the de-raining network on an RGB image.
pub fn derain(model: &CleanModel, visible: &Image) -> Result<Image> {
    if visible.color_space() != ColorSpace::Rgb {
        bail!("de-raining expects an RGB input, got {}", visible.color_space().name());
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(visible.tensor().clone());
    let y = model.net.forward_clamped(&mut tape, &model.ps, x)?;
    Ok(Image::new(ColorSpace::Rgb, tape.value(y).clone())?)
}

/// One fusion stage at inference: fuse the current luminance with infrared,
/// then apply the configured number of refinement steps.
fn fuse_stage(
    model: &FusionModel,
    y_current: &Tensor<f32>,
    infrared: &Tensor<f32>,
    cfg: &FusionConfig,
    stats: &mut RefineStats,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let y = tape.leaf(y_current.clone());
    let ir = tape.leaf(infrared.clone());
    let fused = model.fusion.forward(&mut tape, &model.fusion_ps, y, ir)?;
    let mut state = fused;
    for _ in 0..cfg.adjust_iterations {
        state = refine_step(&mut tape, &model.refine_ps, &model.refine, state, ir, cfg.eps_div, stats)?
            .refined;
    }
    Ok(tape.value(state).clone())
}

/// Everything the two-stage pipeline produces for one input pair.
pub struct PipelineOutput {
    /// Stage-1 result: the de-rained RGB image.
    pub clean: Image,
    /// Stage-2 result: fused RGB (fused luminance + the clean image's chroma).
    pub fused: Image,
    /// Refinement-step invocations, for orchestration audits.
    pub refine_steps: u64,
}

/// Fuses a clean RGB image with its infrared companion: the luminance
/// channel runs through `cascaded_stages` rounds of fusion + refinement, the
/// chroma channels pass through unchanged.
pub fn fuse(model: &FusionModel, clean: &Image, infrared: &Image, cfg: &FusionConfig) -> Result<(Image, u64)> {
    if infrared.color_space() != ColorSpace::Gray {
        bail!("fusion expects a single-channel infrared image");
    }
    if clean.size() != infrared.size() {
        bail!(
            "visible {:?} and infrared {:?} sizes differ",
            clean.size(),
            infrared.size()
        );
    }
    let ycbcr = rgb_to_ycbcr(clean)?;
    let mut y = ycbcr.luma().tensor().clone();
    let ir = infrared.tensor().clone();
    let mut stats = RefineStats::new();
    for _ in 0..cfg.cascaded_stages {
        y = fuse_stage(model, &y, &ir, cfg, &mut stats)?;
    }
    let y_img = Image::new(ColorSpace::Gray, y)?;
    let fused = ycbcr_to_rgb(&with_luma(&ycbcr, &y_img)?)?;
    Ok((fused, stats.steps))
}

/// The full two-stage pipeline on one visible/infrared pair.
pub fn run_pipeline(
    clean_model: &CleanModel,
    fusion_model: &FusionModel,
    visible: &Image,
    infrared: &Image,
    cfg: &FusionConfig,
) -> Result<PipelineOutput> {
    let clean = derain(clean_model, visible)?;
    let (fused, refine_steps) = fuse(fusion_model, &clean, infrared, cfg)?;
    Ok(PipelineOutput { clean, fused, refine_steps })
}
