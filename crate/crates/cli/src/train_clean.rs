//! Stage-1 training: teach the de-raining network to reconstruct the clean
//! visible image from its degraded version, one batch of random patches per
//! optimizer step.
//!
//! Every random draw is derived from `(seed, step)`, never from a long-lived
//! stream, so an interrupted run resumed from a checkpoint replays exactly
//! the trajectory an uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rainfuse_core::autodiff::Tape;
use rainfuse_core::image::{Image, Split};
use rainfuse_core::losses::clean_loss;
use rainfuse_core::nn::{Adam, AdamConfig};
use rainfuse_core::patch::{crop, random_offset};
use rainfuse_core::rng;

use crate::checkpoint::{self, GroupRef};
use crate::config::AppConfig;
use crate::manifest::Manifest;
use crate::model::{self, CleanModel, GROUP_CLEAN};
use crate::pngio;
use crate::trainlog::{self, LossRecord};

pub struct Stage1Options {
    pub config: AppConfig,
    /// Checkpoint to continue from; its stored configuration defines the
    /// model and schedule (only the iteration target comes from this run).
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Stage1Summary {
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn checkpoint_path(config: &AppConfig) -> PathBuf {
    config.checkpoint_dir.join("stage1.rfck")
}

pub fn log_path(config: &AppConfig) -> PathBuf {
    config.checkpoint_dir.join("stage1_log.jsonl")
}

struct TrainPair {
    rainy: Image,
    clean: Image,
}

fn load_training_pairs(config: &AppConfig) -> Result<Vec<TrainPair>> {
    let manifest = Manifest::load(&config.manifest)?;
    let entries = manifest.split(Split::Train);
    if entries.is_empty() {
        bail!("manifest {} has no training pairs", config.manifest.display());
    }
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        let clean_path = e.clean.as_ref().ok_or_else(|| {
            anyhow::anyhow!(
                "training pair {:?} has no clean target; stage-1 training needs one",
                e.id
            )
        })?;
        let rainy = pngio::read_rgb(&e.visible)
            .with_context(|| format!("loading degraded input of pair {:?}", e.id))?;
        let clean = pngio::read_rgb(clean_path)
            .with_context(|| format!("loading clean target of pair {:?}", e.id))?;
        if rainy.size() != clean.size() {
            bail!(
                "pair {:?}: degraded {:?} and clean {:?} sizes differ",
                e.id,
                rainy.size(),
                clean.size()
            );
        }
        let (h, w) = rainy.size();
        if h < config.stage1.patch || w < config.stage1.patch {
            bail!(
                "pair {:?} is {}x{}, smaller than the {} patch size",
                e.id,
                h,
                w,
                config.stage1.patch
            );
        }
        pairs.push(TrainPair { rainy, clean });
    }
    Ok(pairs)
}

pub fn run(opts: &Stage1Options) -> Result<Stage1Summary> {
    // On resume the checkpoint's stored configuration wins (the model shape
    // and schedule must match the saved parameters and optimizer moments);
    // only the iteration target is taken from the current invocation.
    let (config, resumed) = match &opts.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let mut config = ckpt.header.config.clone();
            config.stage1.iterations = opts.config.stage1.iterations;
            config.checkpoint_dir = opts.config.checkpoint_dir.clone();
            config.validate()?;
            (config, Some(ckpt))
        }
        None => (opts.config.clone(), None),
    };

    let pairs = load_training_pairs(&config)?;
    let mut model: CleanModel = model::build_clean(&config.stage1.arch, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig::adamw(config.stage1.lr, config.stage1.weight_decay),
        &model.ps,
    );
    let mut start_step = 0u64;
    if let Some(ckpt) = &resumed {
        ckpt.apply_group(GROUP_CLEAN, &mut model.ps)?;
        ckpt.restore_adam(GROUP_CLEAN, &mut adam)?;
        start_step = ckpt.header.step;
    }

    let ckpt_path = checkpoint_path(&config);
    let log_file = log_path(&config);
    let history = trainlog::load_or_empty(&log_file)?;
    if let Some(last) = history.last() {
        if last.step > start_step {
            bail!(
                "training log {} already has records past step {} (last is {}); \
                 move it aside before resuming",
                log_file.display(),
                start_step,
                last.step
            );
        }
    }

    let iterations = config.stage1.iterations;
    let started = Instant::now();
    let mut final_loss = None;
    let save = |model: &CleanModel, adam: &Adam<f32>, step: u64| -> Result<()> {
        checkpoint::save(
            &ckpt_path,
            "clean",
            step,
            &config,
            &[GroupRef { name: GROUP_CLEAN, params: &model.ps, adam: Some(adam) }],
        )
    };

    if start_step >= iterations {
        if resumed.is_none() {
            // A zero-iteration run still produces a checkpoint: the saved
            // parameters are exactly the seeded initialization.
            save(&model, &adam, start_step)?;
        }
        println!(
            "stage-1: nothing to do (checkpoint at step {start_step}, target {iterations})"
        );
        return Ok(Stage1Summary {
            final_step: start_step,
            final_loss: None,
            checkpoint_path: ckpt_path,
            log_path: log_file,
        });
    }

    for step in (start_step + 1)..=iterations {
        let mut r = rng::seeded(rng::derive_seed(config.seed, "stage1.step", step));
        let mut tape = Tape::<f32>::new();
        let mut batch_total = None;
        for _ in 0..config.stage1.batch {
            let pair = &pairs[rng::gen_index(&mut r, pairs.len())];
            let (h, w) = pair.rainy.size();
            let (row, col) = random_offset(&mut r, h, w, config.stage1.patch);
            let rainy = crop(&pair.rainy, row, col, config.stage1.patch)?;
            let clean = crop(&pair.clean, row, col, config.stage1.patch)?;
            let x = tape.leaf(rainy.tensor().clone());
            let target = tape.leaf(clean.tensor().clone());
            let out = model.net.forward(&mut tape, &model.ps, x)?;
            let loss = clean_loss(&mut tape, out, target)?;
            batch_total = Some(match batch_total {
                None => loss.value,
                Some(acc) => tape.add(acc, loss.value),
            });
        }
        let total = batch_total.expect("batch size is validated >= 1");
        let total = tape.mul_scalar(total, 1.0 / config.stage1.batch as f32);
        let loss_now = tape.scalar_value(total);
        if !loss_now.is_finite() {
            bail!(
                "stage-1 objective became non-finite ({loss_now}) at step {step}; \
                 aborting before the update"
            );
        }
        let grads = tape.backward(total);
        adam.step(&mut model.ps, &grads);
        final_loss = Some(loss_now);

        if step % config.stage1.log_every == 0 || step == iterations {
            let mut components = BTreeMap::new();
            components.insert("l1".to_string(), loss_now);
            trainlog::append(
                &log_file,
                &LossRecord {
                    step,
                    total: loss_now,
                    components,
                    lr: config.stage1.lr,
                    elapsed_ms: started.elapsed().as_millis() as u64,
                    refine_steps: None,
                    images: None,
                },
            )?;
            println!("stage-1 step {step}/{iterations}: loss {loss_now:.6}");
        }
        if step % config.stage1.checkpoint_every == 0 || step == iterations {
            save(&model, &adam, step)?;
        }
    }

    Ok(Stage1Summary {
        final_step: iterations,
        final_loss,
        checkpoint_path: ckpt_path,
        log_path: log_file,
    })
}
