//! Stage-2 training: the cascaded fusion/refinement loop.
//!
//! The stage-1 network is loaded frozen; its parameters live in their own
//! set that no stage-2 optimizer ever sees. Each epoch walks the training
//! pairs in manifest order. Per pair, the de-rained luminance enters a
//! cascade of `cascaded_stages` rounds: measure both sources' information
//! content to get the blend weights, take one fusion-operator update, then
//! `adjust_iterations` refinement updates (the fusion output is detached, so
//! refinement gradients never reach the fusion operator), and feed the
//! refined plane to the next round. Model evolution within a round always
//! uses values computed before that round's parameter updates.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rainfuse_core::autodiff::Tape;
use rainfuse_core::fusionnet::{
    adaptive_weights, information_measurement, refine_step, FeatureExtractor, RefineStats,
};
use rainfuse_core::image::{rgb_to_ycbcr, Image, Split};
use rainfuse_core::losses::{fusion_loss, refinement_loss};
use rainfuse_core::nn::{Adam, AdamConfig};
use rainfuse_core::tensor::Tensor;

use crate::checkpoint::{self, GroupRef};
use crate::config::AppConfig;
use crate::infer;
use crate::manifest::Manifest;
use crate::model::{self, CleanModel, FusionModel, GROUP_FUSION, GROUP_REFINE};
use crate::pngio;
use crate::trainlog::{self, LossRecord};

pub struct Stage2Options {
    pub config: AppConfig,
    pub stage1_checkpoint: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Stage2Summary {
    pub final_epoch: u64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn checkpoint_path(config: &AppConfig) -> PathBuf {
    config.checkpoint_dir.join("stage2.rfck")
}

pub fn log_path(config: &AppConfig) -> PathBuf {
    config.checkpoint_dir.join("stage2_log.jsonl")
}

struct FusionPair {
    id: String,
    visible: Image,
    infrared: Image,
}

fn load_pairs(config: &AppConfig) -> Result<Vec<FusionPair>> {
    let manifest = Manifest::load(&config.manifest)?;
    let entries = manifest.split(Split::Train);
    if entries.is_empty() {
        bail!("manifest {} has no training pairs", config.manifest.display());
    }
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        let visible = pngio::read_rgb(&e.visible)
            .with_context(|| format!("loading visible input of pair {:?}", e.id))?;
        let infrared = pngio::read_gray(&e.infrared)
            .with_context(|| format!("loading infrared input of pair {:?}", e.id))?;
        if visible.size() != infrared.size() {
            bail!(
                "pair {:?}: visible {:?} and infrared {:?} sizes differ",
                e.id,
                visible.size(),
                infrared.size()
            );
        }
        pairs.push(FusionPair { id: e.id.clone(), visible, infrared });
    }
    Ok(pairs)
}

/// Running means of the epoch's losses and their sub-terms.
#[derive(Default)]
struct EpochAccumulator {
    fusion_sum: f64,
    fusion_parts: BTreeMap<&'static str, f64>,
    fusion_count: u64,
    refine_sum: f64,
    refine_parts: BTreeMap<&'static str, f64>,
    refine_count: u64,
}

impl EpochAccumulator {
    fn components(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if self.fusion_count > 0 {
            out.insert("fusion".to_string(), self.fusion_sum / self.fusion_count as f64);
            for (k, v) in &self.fusion_parts {
                out.insert(format!("fusion.{k}"), v / self.fusion_count as f64);
            }
        }
        if self.refine_count > 0 {
            out.insert("refine".to_string(), self.refine_sum / self.refine_count as f64);
            for (k, v) in &self.refine_parts {
                out.insert(format!("refine.{k}"), v / self.refine_count as f64);
            }
        }
        out
    }
}

pub fn run(opts: &Stage2Options) -> Result<Stage2Summary> {
    let stage1 = checkpoint::load(&opts.stage1_checkpoint)?;
    let clean_model: CleanModel = model::clean_from_checkpoint(&stage1)?;

    // As in stage 1, a resumed run restores the checkpoint's configuration;
    // only the epoch target and checkpoint directory follow this invocation.
    let (config, resumed) = match &opts.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let mut config = ckpt.header.config.clone();
            config.stage2.epochs = opts.config.stage2.epochs;
            config.checkpoint_dir = opts.config.checkpoint_dir.clone();
            config.validate()?;
            (config, Some(ckpt))
        }
        None => (opts.config.clone(), None),
    };

    let pairs = load_pairs(&config)?;
    let extractor = model::build_extractor(&config.stage2);
    let mut fm: FusionModel = model::build_fusion(config.seed);
    let adam_cfg_fusion = AdamConfig::adam(config.stage2.lr_fusion, config.stage2.weight_decay);
    let adam_cfg_refine = AdamConfig::adam(config.stage2.lr_refine, config.stage2.weight_decay);
    let mut adam_fusion = Adam::new(adam_cfg_fusion, &fm.fusion_ps);
    let mut adam_refine = Adam::new(adam_cfg_refine, &fm.refine_ps);
    let mut start_epoch = 0u64;
    if let Some(ckpt) = &resumed {
        ckpt.apply_group(GROUP_FUSION, &mut fm.fusion_ps)?;
        ckpt.apply_group(GROUP_REFINE, &mut fm.refine_ps)?;
        ckpt.restore_adam(GROUP_FUSION, &mut adam_fusion)?;
        ckpt.restore_adam(GROUP_REFINE, &mut adam_refine)?;
        start_epoch = ckpt.header.step;
    }

    let ckpt_path = checkpoint_path(&config);
    let log_file = log_path(&config);
    let history = trainlog::load_or_empty(&log_file)?;
    if let Some(last) = history.last() {
        if last.step > start_epoch {
            bail!(
                "training log {} already has records past epoch {} (last is {}); \
                 move it aside before resuming",
                log_file.display(),
                start_epoch,
                last.step
            );
        }
    }

    let fusion_cfg = &config.stage2.fusion;
    let epochs = config.stage2.epochs;
    let started = Instant::now();
    let save = |fm: &FusionModel, af: &Adam<f32>, ar: &Adam<f32>, epoch: u64| -> Result<()> {
        checkpoint::save(
            &ckpt_path,
            "fusion",
            epoch,
            &config,
            &[
                GroupRef { name: GROUP_FUSION, params: &fm.fusion_ps, adam: Some(af) },
                GroupRef { name: GROUP_REFINE, params: &fm.refine_ps, adam: Some(ar) },
            ],
        )
    };

    if start_epoch >= epochs {
        if resumed.is_none() {
            save(&fm, &adam_fusion, &adam_refine, start_epoch)?;
        }
        println!("stage-2: nothing to do (checkpoint at epoch {start_epoch}, target {epochs})");
        return Ok(Stage2Summary {
            final_epoch: start_epoch,
            checkpoint_path: ckpt_path,
            log_path: log_file,
        });
    }

    for epoch in (start_epoch + 1)..=epochs {
        let mut acc = EpochAccumulator::default();
        let mut stats = RefineStats::new();
        for pair in &pairs {
            // The frozen stage-1 network regenerates the clean image each
            // epoch; it is identical every time, which doubles as a check
            // that stage-2 training never drifts the stage-1 parameters.
            let clean = infer::derain(&clean_model, &pair.visible)?;
            let ycbcr = rgb_to_ycbcr(&clean)?;
            let mut y_cur: Tensor<f32> = ycbcr.luma().tensor().clone();
            let ir: Tensor<f32> = pair.infrared.tensor().clone();

            for _stage in 0..fusion_cfg.cascaded_stages {
                let fused_val = fusion_update(
                    &mut fm,
                    &mut adam_fusion,
                    extractor.as_ref(),
                    &y_cur,
                    &ir,
                    fusion_cfg.alpha,
                    &mut acc,
                    &pair.id,
                    epoch,
                )?;
                let mut state = fused_val;
                for _iter in 0..fusion_cfg.adjust_iterations {
                    state = refine_update(
                        &mut fm,
                        &mut adam_refine,
                        &state,
                        &ir,
                        fusion_cfg.beta,
                        fusion_cfg.eps_div,
                        &mut stats,
                        &mut acc,
                        &pair.id,
                        epoch,
                    )?;
                }
                y_cur = state;
            }
        }

        let components = acc.components();
        let total = components.get("fusion").copied().unwrap_or(0.0);
        trainlog::append(
            &log_file,
            &LossRecord {
                step: epoch,
                total,
                components,
                lr: config.stage2.lr_fusion,
                elapsed_ms: started.elapsed().as_millis() as u64,
                refine_steps: Some(stats.steps),
                images: Some(pairs.len() as u64),
            },
        )?;
        println!(
            "stage-2 epoch {epoch}/{epochs}: fusion {total:.6}, refine steps {}",
            stats.steps
        );
        save(&fm, &adam_fusion, &adam_refine, epoch)?;
    }

    Ok(Stage2Summary { final_epoch: epochs, checkpoint_path: ckpt_path, log_path: log_file })
}

/// One fusion-operator update. Returns the fused plane computed with the
/// pre-update parameters; the cascade continues from that value.
#[allow(clippy::too_many_arguments)]
fn fusion_update(
    fm: &mut FusionModel,
    adam: &mut Adam<f32>,
    extractor: &dyn FeatureExtractor,
    y_cur: &Tensor<f32>,
    ir: &Tensor<f32>,
    alpha: f64,
    acc: &mut EpochAccumulator,
    pair_id: &str,
    epoch: u64,
) -> Result<Tensor<f32>> {
    let info_v = information_measurement(y_cur, extractor)?;
    let info_i = information_measurement(ir, extractor)?;
    let weights = adaptive_weights(info_v, info_i)?;

    let mut tape = Tape::<f32>::new();
    let y = tape.leaf(y_cur.clone());
    let ir_leaf = tape.leaf(ir.clone());
    let fused = fm.fusion.forward(&mut tape, &fm.fusion_ps, y, ir_leaf)?;
    let loss = fusion_loss(&mut tape, y, fused, ir_leaf, &weights, alpha)?;
    let (total, parts) = loss.read(&tape);
    if !total.is_finite() {
        bail!("fusion objective became non-finite ({total}) on pair {pair_id:?}, epoch {epoch}");
    }
    acc.fusion_sum += total;
    for (name, v) in parts {
        *acc.fusion_parts.entry(name).or_insert(0.0) += v;
    }
    acc.fusion_count += 1;

    let fused_val = tape.value(fused).clone();
    let grads = tape.backward(loss.value);
    adam.step(&mut fm.fusion_ps, &grads);
    Ok(fused_val)
}

/// One refinement update. The input plane is a detached leaf, so the step
/// trains only the refinement networks; returns the refined plane computed
/// with the pre-update parameters.
#[allow(clippy::too_many_arguments)]
fn refine_update(
    fm: &mut FusionModel,
    adam: &mut Adam<f32>,
    fused: &Tensor<f32>,
    ir: &Tensor<f32>,
    beta: f64,
    eps_div: f64,
    stats: &mut RefineStats,
    acc: &mut EpochAccumulator,
    pair_id: &str,
    epoch: u64,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let f = tape.leaf(fused.clone());
    let ir_leaf = tape.leaf(ir.clone());
    let outcome = refine_step(&mut tape, &fm.refine_ps, &fm.refine, f, ir_leaf, eps_div, stats)?;
    let loss = refinement_loss(&mut tape, f, outcome.refined, outcome.adjust, beta)?;
    let (total, parts) = loss.read(&tape);
    if !total.is_finite() {
        bail!(
            "refinement objective became non-finite ({total}) on pair {pair_id:?}, epoch {epoch}"
        );
    }
    acc.refine_sum += total;
    for (name, v) in parts {
        *acc.refine_parts.entry(name).or_insert(0.0) += v;
    }
    acc.refine_count += 1;

    let refined_val = tape.value(outcome.refined).clone();
    let grads = tape.backward(loss.value);
    adam.step(&mut fm.refine_ps, &grads);
    Ok(refined_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::synth::{self, SynthSpec};
    use crate::train_clean;
    use rainfuse_core::rain::RainParams;

    fn setup(dir: &std::path::Path) -> (AppConfig, PathBuf) {
        let spec = SynthSpec {
            pairs: 2,
            train: 2,
            height: 24,
            width: 24,
            seed: 9,
            rain: RainParams::default(),
        };
        let manifest = synth::generate(&dir.join("data"), &spec).unwrap();
        let mut config = AppConfig::profile_defaults(Profile::Desk);
        config.manifest = manifest;
        config.checkpoint_dir = dir.join("ckpt");
        config.stage1.iterations = 0;
        config.stage1.patch = 16;
        config.stage1.arch.base_channels = 8;
        config.stage1.arch.attention_hidden = 6;
        config.stage1.arch.num_experts = 2;
        config.stage1.arch.num_moe_blocks = 1;
        config.stage1.arch.num_transformer_blocks = 1;
        config.stage1.arch.heads = 1;
        config.stage2.epochs = 2;
        config.stage2.fusion.cascaded_stages = 2;
        config.stage2.fusion.adjust_iterations = 2;
        let s1 = train_clean::run(&train_clean::Stage1Options { config: config.clone(), resume: None })
            .unwrap();
        (config, s1.checkpoint_path)
    }

    #[test]
    fn epoch_logs_count_refine_steps_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (config, stage1) = setup(dir.path());
        let summary = run(&Stage2Options {
            config: config.clone(),
            stage1_checkpoint: stage1,
            resume: None,
        })
        .unwrap();
        let log = trainlog::load(&summary.log_path).unwrap();
        assert_eq!(log.len(), 2);
        for rec in &log {
            // K * T refinement steps per image per epoch.
            assert_eq!(rec.images, Some(2));
            assert_eq!(rec.refine_steps, Some(2 * 2 * 2));
            assert!(rec.components.contains_key("fusion.ssim"));
            assert!(rec.components.contains_key("refine.smoothness"));
            assert!(rec.total.is_finite());
        }
    }

    #[test]
    fn stage1_checkpoint_is_never_modified() {
        let dir = tempfile::tempdir().unwrap();
        let (config, stage1) = setup(dir.path());
        let before = std::fs::read(&stage1).unwrap();
        run(&Stage2Options { config, stage1_checkpoint: stage1.clone(), resume: None }).unwrap();
        assert_eq!(before, std::fs::read(&stage1).unwrap());
    }

    #[test]
    fn zero_refinements_leave_refinement_parameters_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, stage1) = setup(dir.path());
        config.stage2.fusion.cascaded_stages = 1;
        config.stage2.fusion.adjust_iterations = 0;
        config.stage2.epochs = 1;
        let summary =
            run(&Stage2Options { config: config.clone(), stage1_checkpoint: stage1, resume: None })
                .unwrap();
        let ckpt = checkpoint::load(&summary.checkpoint_path).unwrap();
        let fresh = model::build_fusion(config.seed);
        let (_, refine_saved) = ckpt.group(GROUP_REFINE).unwrap();
        for ((_, _, init), saved) in fresh.refine_ps.iter().zip(&refine_saved.params) {
            assert_eq!(init.data(), saved.data(), "refinement parameters moved");
        }
        // The fusion group must have moved: it took K updates per image.
        let (_, fusion_saved) = ckpt.group(GROUP_FUSION).unwrap();
        let moved = fresh
            .fusion_ps
            .iter()
            .zip(&fusion_saved.params)
            .any(|((_, _, init), saved)| init.data() != saved.data());
        assert!(moved, "fusion parameters did not move");
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, stage1) = setup(dir.path());
        config.stage2.epochs = 1;
        let first = run(&Stage2Options {
            config: config.clone(),
            stage1_checkpoint: stage1.clone(),
            resume: None,
        })
        .unwrap();
        config.stage2.epochs = 2;
        let second = run(&Stage2Options {
            config: config.clone(),
            stage1_checkpoint: stage1,
            resume: Some(first.checkpoint_path.clone()),
        })
        .unwrap();
        assert_eq!(second.final_epoch, 2);
        let log = trainlog::load(&second.log_path).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
    }
}
