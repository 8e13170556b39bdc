//! Command-line front end: dataset synthesis, the two training stages,
//! inference, evaluation, and reporting.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rainfuse::config::{
    self, ConfigOverlay, ExtractorKind, Profile, Stage1Overlay, Stage2Overlay, CHECKPOINT_DIR_ENV,
};
use rainfuse::{checkpoint, eval, infer, model, pngio, report, synth, train_clean, train_fusion};
use rainfuse_core::rain::RainParams;

#[derive(Parser)]
#[command(
    name = "rainfuse",
    about = "Nighttime image de-raining and visible/infrared fusion pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering, exposed on every training-related subcommand.
/// Precedence: profile defaults < config file < environment < these flags.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings profile when neither flag nor file picks one.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Root random seed for the whole run.
    #[arg(long)]
    seed: Option<u64>,
    /// Where checkpoints and training logs live (env: RAINFUSE_CHECKPOINT_DIR).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Dataset manifest (one JSON record per line).
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Stage-1 optimizer steps.
    #[arg(long)]
    iterations: Option<u64>,
    /// Stage-1 patches per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Stage-1 training crop side length.
    #[arg(long)]
    patch: Option<usize>,
    /// Stage-1 learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Stage-1 decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Steps between stage-1 log records.
    #[arg(long)]
    log_every: Option<u64>,
    /// Steps between stage-1 periodic checkpoints.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// De-raining network: feature channels.
    #[arg(long)]
    channels: Option<usize>,
    /// De-raining network: expert-gate hidden width.
    #[arg(long)]
    gate_hidden: Option<usize>,
    /// De-raining network: experts per mixture block.
    #[arg(long)]
    experts: Option<usize>,
    /// De-raining network: mixture blocks.
    #[arg(long)]
    mixture_blocks: Option<usize>,
    /// De-raining network: attention encoder blocks.
    #[arg(long)]
    encoder_blocks: Option<usize>,
    /// De-raining network: fraction of attention keys kept per query.
    #[arg(long)]
    topk_fraction: Option<f64>,
    /// De-raining network: attention heads.
    #[arg(long)]
    heads: Option<usize>,

    /// Stage-2 epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// Stage-2 fusion-operator learning rate.
    #[arg(long)]
    lr_fusion: Option<f64>,
    /// Stage-2 refinement learning rate.
    #[arg(long)]
    lr_refine: Option<f64>,
    /// Stage-2 weight decay (both optimizers).
    #[arg(long)]
    stage2_weight_decay: Option<f64>,
    /// Cascaded fusion stages per image (K).
    #[arg(long)]
    stages: Option<usize>,
    /// Refinement iterations inside each stage (T).
    #[arg(long)]
    refinements: Option<usize>,
    /// Intensity-term weight in the fusion objective.
    #[arg(long)]
    alpha: Option<f64>,
    /// Consistency-term weight in the refinement objective.
    #[arg(long)]
    beta: Option<f64>,
    /// Guard added to the contrast-balance denominator.
    #[arg(long)]
    eps_div: Option<f64>,
    /// Feature extractor for information measurement.
    #[arg(long, value_enum)]
    extractor: Option<ExtractorKind>,
    /// Seed for the random-weights measurement backbone.
    #[arg(long)]
    backbone_seed: Option<u64>,
}

impl ConfigArgs {
    fn overlay(&self) -> ConfigOverlay {
        ConfigOverlay {
            profile: self.profile,
            seed: self.seed,
            checkpoint_dir: self.checkpoint_dir.clone(),
            manifest: self.manifest.clone(),
            stage1: Stage1Overlay {
                iterations: self.iterations,
                batch: self.batch,
                patch: self.patch,
                lr: self.lr,
                weight_decay: self.weight_decay,
                log_every: self.log_every,
                checkpoint_every: self.checkpoint_every,
                channels: self.channels,
                gate_hidden: self.gate_hidden,
                experts: self.experts,
                mixture_blocks: self.mixture_blocks,
                encoder_blocks: self.encoder_blocks,
                topk_fraction: self.topk_fraction,
                heads: self.heads,
            },
            stage2: Stage2Overlay {
                epochs: self.epochs,
                lr_fusion: self.lr_fusion,
                lr_refine: self.lr_refine,
                weight_decay: self.stage2_weight_decay,
                stages: self.stages,
                refinements: self.refinements,
                alpha: self.alpha,
                beta: self.beta,
                eps_div: self.eps_div,
                extractor: self.extractor,
                backbone_seed: self.backbone_seed,
            },
        }
    }

    fn resolve(&self) -> Result<config::AppConfig> {
        let env_dir = std::env::var(CHECKPOINT_DIR_ENV).ok();
        config::resolve(self.config.as_deref(), &self.overlay(), env_dir.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: clean/degraded visible images, infrared
    /// companions, and a manifest.
    Synth {
        /// Output directory (images go under images/, manifest.jsonl beside).
        #[arg(long)]
        out_dir: PathBuf,
        /// Total scene pairs to generate.
        #[arg(long, default_value_t = 6)]
        pairs: usize,
        /// How many pairs land in the train split; the rest are test.
        #[arg(long, default_value_t = 4)]
        train: usize,
        /// Scene height in pixels.
        #[arg(long, default_value_t = 96)]
        height: usize,
        /// Scene width in pixels.
        #[arg(long, default_value_t = 96)]
        width: usize,
        /// Root seed for scenes and rain.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Streaks per image.
        #[arg(long, default_value_t = RainParams::default().streak_count)]
        streaks: usize,
        /// Streak length in pixels.
        #[arg(long, default_value_t = RainParams::default().streak_length)]
        streak_length: usize,
        /// Streak angle in degrees from vertical.
        #[arg(long, default_value_t = RainParams::default().angle_deg)]
        angle: f32,
        /// Streak brightness scale in [0, 1].
        #[arg(long, default_value_t = RainParams::default().intensity)]
        intensity: f32,
        /// Gaussian blur applied to the streak layer.
        #[arg(long, default_value_t = RainParams::default().blur_sigma)]
        blur_sigma: f32,
        /// Global dimming factor applied before streaks.
        #[arg(long, default_value_t = RainParams::default().dim_factor)]
        dim_factor: f32,
    },
    /// Train the stage-1 de-raining network.
    TrainClean {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint (its stored configuration defines
        /// the model; --iterations sets the new target).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the stage-2 fusion and refinement networks against a frozen
    /// stage-1 checkpoint.
    TrainFusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage-1 checkpoint to de-rain training inputs with.
        #[arg(long)]
        stage1: PathBuf,
        /// Continue from this stage-2 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the full pipeline on one visible/infrared pair.
    Infer {
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-2 checkpoint.
        #[arg(long)]
        stage2: PathBuf,
        /// Visible-light input image (PNG).
        #[arg(long)]
        visible: PathBuf,
        /// Infrared input image (PNG).
        #[arg(long)]
        infrared: PathBuf,
        /// Where clean.png and fused.png are written.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the checkpoint's cascaded stage count (K).
        #[arg(long)]
        stages: Option<usize>,
        /// Override the checkpoint's refinement iterations (T).
        #[arg(long)]
        refinements: Option<usize>,
    },
    /// Evaluate the pipeline on the manifest's test split and write a
    /// tab-separated metric table (rows per pair plus a mean row).
    Eval {
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-2 checkpoint.
        #[arg(long)]
        stage2: PathBuf,
        /// Output table path.
        #[arg(long)]
        out: PathBuf,
        /// Include the difference-correlation column.
        #[arg(long)]
        scd: bool,
        /// Also write each pair's de-rained and fused images here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Render loss curves and a text summary from a training log.
    Report {
        /// Training log (one JSON record per line).
        #[arg(long)]
        log: PathBuf,
        /// Output directory for summary.txt and the SVG curves.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out_dir,
            pairs,
            train,
            height,
            width,
            seed,
            streaks,
            streak_length,
            angle,
            intensity,
            blur_sigma,
            dim_factor,
        } => {
            let spec = synth::SynthSpec {
                pairs,
                train,
                height,
                width,
                seed,
                rain: RainParams {
                    streak_count: streaks,
                    streak_length,
                    angle_deg: angle,
                    intensity,
                    blur_sigma,
                    dim_factor,
                    seed: 0,
                },
            };
            let manifest = synth::generate(&out_dir, &spec)?;
            println!("synth: wrote {pairs} pairs, manifest at {}", manifest.display());
        }
        Command::TrainClean { cfg, resume } => {
            let config = cfg.resolve()?;
            let summary = train_clean::run(&train_clean::Stage1Options { config, resume })?;
            println!(
                "train-clean: step {} done, checkpoint {}, log {}",
                summary.final_step,
                summary.checkpoint_path.display(),
                summary.log_path.display()
            );
        }
        Command::TrainFusion { cfg, stage1, resume } => {
            let config = cfg.resolve()?;
            let summary = train_fusion::run(&train_fusion::Stage2Options {
                config,
                stage1_checkpoint: stage1,
                resume,
            })?;
            println!(
                "train-fusion: epoch {} done, checkpoint {}, log {}",
                summary.final_epoch,
                summary.checkpoint_path.display(),
                summary.log_path.display()
            );
        }
        Command::Infer { stage1, stage2, visible, infrared, out_dir, stages, refinements } => {
            let s1 = checkpoint::load(&stage1)?;
            let clean_model = model::clean_from_checkpoint(&s1)?;
            let s2 = checkpoint::load(&stage2)?;
            let fusion_model = model::fusion_from_checkpoint(&s2)?;
            let mut fusion_cfg = s2.header.config.stage2.fusion.clone();
            if let Some(k) = stages {
                fusion_cfg.cascaded_stages = k;
            }
            if let Some(t) = refinements {
                fusion_cfg.adjust_iterations = t;
            }
            if fusion_cfg.cascaded_stages == 0 {
                anyhow::bail!("--stages must be >= 1");
            }
            let vis = pngio::read_rgb(&visible)?;
            let ir = pngio::read_gray(&infrared)?;
            let out = infer::run_pipeline(&clean_model, &fusion_model, &vis, &ir, &fusion_cfg)?;
            pngio::write_png(&out_dir.join("clean.png"), &out.clean)?;
            pngio::write_png(&out_dir.join("fused.png"), &out.fused)?;
            println!(
                "infer: wrote {}/clean.png and fused.png ({} refinement steps)",
                out_dir.display(),
                out.refine_steps
            );
        }
        Command::Eval { manifest, stage1, stage2, out, scd, dump_dir } => {
            let summary = eval::run(&eval::EvalOptions {
                manifest,
                stage1_checkpoint: stage1,
                stage2_checkpoint: stage2,
                out,
                include_scd: scd,
                dump_dir,
            })?;
            println!(
                "eval: {} pairs, mean psnr {:.3}, mean qabf {:.4}, table {}",
                summary.reports.len(),
                summary.mean.psnr,
                summary.mean.qabf,
                summary.table_path.display()
            );
        }
        Command::Report { log, out_dir } => {
            report::run(&log, &out_dir)?;
        }
    }
    Ok(())
}
