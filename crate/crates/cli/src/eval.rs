//! Test-split evaluation: run the full pipeline on every test pair, score
//! the fused result against its de-rained visible and infrared sources, and
//! write a tab-separated table with one row per pair plus a final mean row.
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! parsed table reproduces the computed numbers exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rainfuse_core::image::Split;
use rainfuse_core::metrics::{evaluate_pair, MetricReport};

use crate::checkpoint;
use crate::infer;
use crate::manifest::Manifest;
use crate::model;
use crate::pngio;

pub struct EvalOptions {
    pub manifest: PathBuf,
    pub stage1_checkpoint: PathBuf,
    pub stage2_checkpoint: PathBuf,
    pub out: PathBuf,
    pub include_scd: bool,
    /// When set, the de-rained and fused images are also written here.
    pub dump_dir: Option<PathBuf>,
}

fn header(include_scd: bool) -> String {
    let mut cols = vec!["pair_id".to_string()];
    // Column names come from the report itself so the table and the metric
    // suite cannot drift apart.
    let sample = MetricReport {
        pair_id: String::new(),
        psnr: 0.0,
        ssim: 0.0,
        ms_ssim: 0.0,
        mi: 0.0,
        vif: 0.0,
        cc: 0.0,
        fmi_pixel: 0.0,
        fmi_dct: 0.0,
        fmi_w: 0.0,
        mse: 0.0,
        qabf: 0.0,
        scd: None,
    };
    cols.extend(sample.core_values().iter().map(|(n, _)| n.to_string()));
    if include_scd {
        cols.push("scd".to_string());
    }
    cols.join("\t")
}

fn row(report: &MetricReport, include_scd: bool) -> Result<String> {
    let mut cols = vec![report.pair_id.clone()];
    cols.extend(report.core_values().iter().map(|(_, v)| format!("{v}")));
    if include_scd {
        let Some(scd) = report.scd else {
            bail!("pair {:?} is missing its difference-correlation value", report.pair_id)
        };
        cols.push(format!("{scd}"));
    }
    Ok(cols.join("\t"))
}

#[derive(Debug)]
pub struct EvalSummary {
    pub reports: Vec<MetricReport>,
    pub mean: MetricReport,
    pub table_path: PathBuf,
}

pub fn run(opts: &EvalOptions) -> Result<EvalSummary> {
    let manifest = Manifest::load(&opts.manifest)?;
    let entries = manifest.split(Split::Test);
    if entries.is_empty() {
        // No partial output file: fail before touching the filesystem.
        bail!("manifest {} has no test pairs", opts.manifest.display());
    }

    let stage1 = checkpoint::load(&opts.stage1_checkpoint)?;
    let clean_model = model::clean_from_checkpoint(&stage1)?;
    let stage2 = checkpoint::load(&opts.stage2_checkpoint)?;
    let fusion_model = model::fusion_from_checkpoint(&stage2)?;
    let fusion_cfg = stage2.header.config.stage2.fusion.clone();

    let mut reports = Vec::with_capacity(entries.len());
    for e in &entries {
        let visible = pngio::read_rgb(&e.visible)
            .with_context(|| format!("loading visible input of pair {:?}", e.id))?;
        let infrared = pngio::read_gray(&e.infrared)
            .with_context(|| format!("loading infrared input of pair {:?}", e.id))?;
        let out = infer::run_pipeline(&clean_model, &fusion_model, &visible, &infrared, &fusion_cfg)?;
        if let Some(dir) = &opts.dump_dir {
            pngio::write_png(&dir.join(format!("{}_clean.png", e.id)), &out.clean)?;
            pngio::write_png(&dir.join(format!("{}_fused.png", e.id)), &out.fused)?;
        }
        let report = evaluate_pair(&e.id, &out.clean, &infrared, &out.fused, opts.include_scd)?;
        println!(
            "eval {}: psnr {:.3}, ssim {:.4}, qabf {:.4}",
            e.id, report.psnr, report.ssim, report.qabf
        );
        reports.push(report);
    }
    let mean = MetricReport::mean(&reports).expect("at least one report");

    write_table(&opts.out, &reports, &mean, opts.include_scd)?;
    Ok(EvalSummary { reports, mean, table_path: opts.out.clone() })
}

fn write_table(
    path: &Path,
    reports: &[MetricReport],
    mean: &MetricReport,
    include_scd: bool,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    let mut out = std::fs::File::create(path)
        .with_context(|| format!("writing metric table {}", path.display()))?;
    writeln!(out, "{}", header(include_scd))?;
    for r in reports {
        writeln!(out, "{}", row(r, include_scd)?)?;
    }
    writeln!(out, "{}", row(mean, include_scd)?)?;
    Ok(())
}

/// Parses a table written by [`run`]; returns (header, rows) where each row
/// is the pair id plus its numeric columns.
pub fn parse_table(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading metric table {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().unwrap_or_default().split('\t').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let mut values = Vec::new();
        for c in cols {
            values.push(
                c.parse::<f64>()
                    .with_context(|| format!("table row {}: bad number {:?}", idx + 2, c))?,
            );
        }
        if values.len() != header.len() - 1 {
            bail!(
                "table row {} has {} numeric columns, header promises {}",
                idx + 2,
                values.len(),
                header.len() - 1
            );
        }
        rows.push((id, values));
    }
    Ok((header, rows))
}
