//! Training-run reports: one SVG loss curve per logged component plus a
//! plain-text summary. An empty log yields an empty summary and no plots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::trainlog::{self, LossRecord};

#[derive(Debug)]
pub struct ReportSummary {
    pub records: usize,
    pub curves: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

/// Series name -> the (step, value) points it plots. "total" is always
/// present for a non-empty log; component series use their logged names.
fn series_of(records: &[LossRecord]) -> Vec<(String, Vec<(u64, f64)>)> {
    let mut names = BTreeSet::new();
    for r in records {
        names.extend(r.components.keys().cloned());
    }
    let mut out = Vec::new();
    out.push((
        "total".to_string(),
        records.iter().map(|r| (r.step, r.total)).collect::<Vec<_>>(),
    ));
    for name in names {
        let points: Vec<(u64, f64)> = records
            .iter()
            .filter_map(|r| r.components.get(&name).map(|v| (r.step, *v)))
            .collect();
        if !points.is_empty() {
            out.push((name, points));
        }
    }
    out
}

fn svg_curve(title: &str, points: &[(u64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 45.0;
    let (x0, x1) = (points.first().unwrap().0 as f64, points.last().unwrap().0 as f64);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, v) in points {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !(hi > lo) {
        // Flat or single-point series: open up a band around the value.
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        hi = lo + pad;
        lo -= pad;
    }
    let xs = |s: f64| {
        if x1 > x0 {
            ML + (s - x0) / (x1 - x0) * (W - ML - MR)
        } else {
            (ML + W - MR) / 2.0
        }
    };
    let ys = |v: f64| H - MB - (v - lo) / (hi - lo) * (H - MT - MB);

    let mut path = String::new();
    for (i, (s, v)) in points.iter().enumerate() {
        let sep = if i == 0 { "" } else { " " };
        let _ = write!(path, "{sep}{:.2},{:.2}", xs(*s as f64), ys(*v));
    }
    let mut svg = String::new();
    let _ = write!(
        svg,
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" ",
            "text-anchor=\"middle\">{title}</text>\n",
            "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<text x=\"{ml}\" y=\"{xl}\" font-family=\"monospace\" font-size=\"12\">step {s0}</text>\n",
            "<text x=\"{xr}\" y=\"{xl}\" font-family=\"monospace\" font-size=\"12\" ",
            "text-anchor=\"end\">step {s1}</text>\n",
            "<text x=\"{ml2}\" y=\"{yb2}\" font-family=\"monospace\" font-size=\"12\" ",
            "text-anchor=\"end\">{lo:.6}</text>\n",
            "<text x=\"{ml2}\" y=\"{mt2}\" font-family=\"monospace\" font-size=\"12\" ",
            "text-anchor=\"end\">{hi:.6}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{path}\"/>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        tx = W / 2.0,
        title = title,
        ml = ML,
        ml2 = ML - 6.0,
        mt = MT,
        mt2 = MT + 4.0,
        yb = H - MB,
        yb2 = H - MB + 4.0,
        xr = W - MR,
        xl = H - MB + 24.0,
        s0 = points.first().unwrap().0,
        s1 = points.last().unwrap().0,
        lo = lo,
        hi = hi,
        path = path,
    );
    svg
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn run(log_path: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let records = trainlog::load(log_path)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating report directory {}", out_dir.display()))?;
    let summary_path = out_dir.join("summary.txt");
    let mut summary = std::fs::File::create(&summary_path)
        .with_context(|| format!("writing {}", summary_path.display()))?;

    if records.is_empty() {
        writeln!(summary, "log {}: no records", log_path.display())?;
        println!("report: log is empty, wrote {}", summary_path.display());
        return Ok(ReportSummary { records: 0, curves: Vec::new(), summary_path });
    }

    let mut curves = Vec::new();
    let series = series_of(&records);
    for (name, points) in &series {
        let path = out_dir.join(format!("loss_{}.svg", file_stem(name)));
        std::fs::write(&path, svg_curve(name, points))
            .with_context(|| format!("writing {}", path.display()))?;
        curves.push(path);
    }

    let first = records.first().unwrap();
    let last = records.last().unwrap();
    writeln!(summary, "log {}", log_path.display())?;
    writeln!(summary, "records {}", records.len())?;
    writeln!(summary, "steps {}..{}", first.step, last.step)?;
    writeln!(summary, "elapsed_ms {}", last.elapsed_ms)?;
    writeln!(summary, "final total {}", last.total)?;
    for (name, value) in &last.components {
        writeln!(summary, "final {name} {value}")?;
    }
    if let (Some(rs), Some(imgs)) = (last.refine_steps, last.images) {
        writeln!(summary, "final refine_steps {rs}")?;
        writeln!(summary, "final images {imgs}")?;
    }
    println!(
        "report: {} records, {} curves, summary at {}",
        records.len(),
        curves.len(),
        summary_path.display()
    );
    Ok(ReportSummary { records: records.len(), curves, summary_path })
}
