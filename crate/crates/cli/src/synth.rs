//! Procedural nighttime scene generation.
//!
//! Each scene is a dark visible-light image and an aligned infrared
//! companion: a dim gradient sky over a ground band, a handful of boxy
//! structures, small bright light sources, and mild sensor noise. The same
//! geometry drives both modalities, but brightness is drawn independently, so
//! the infrared view reveals structure the visible view hides (and vice
//! versa). The degraded visible input is produced by the rain synthesizer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use rainfuse_core::image::{ColorSpace, Image, Split};
use rainfuse_core::rain::{synthesize_rain, RainParams};
use rainfuse_core::rng::{self, Rng};
use rainfuse_core::tensor::Tensor;

use crate::manifest::{Manifest, ManifestEntry};
use crate::pngio;

pub struct SynthSpec {
    pub pairs: usize,
    /// How many of the pairs land in the train split; the rest are test.
    pub train: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub rain: RainParams,
}

struct Shape {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    rgb: [f32; 3],
    ir: f32,
}

fn paint(canvas: &mut Tensor<f32>, shape: &Shape, visible: bool) {
    let (c, hh, ww) = (canvas.dims()[0], canvas.dims()[1], canvas.dims()[2]);
    for y in shape.top..(shape.top + shape.h).min(hh) {
        for x in shape.left..(shape.left + shape.w).min(ww) {
            if visible {
                for ch in 0..c {
                    *canvas.at3_mut(ch, y, x) = shape.rgb[ch];
                }
            } else {
                *canvas.at3_mut(0, y, x) = shape.ir;
            }
        }
    }
}

/// Renders one clean visible/infrared scene pair.
pub fn scene(height: usize, width: usize, seed: u64) -> Result<(Image, Image)> {
    let mut r: Rng = rng::seeded(seed);
    let mut vis = Tensor::<f32>::zeros(vec![3, height, width]);
    let mut ir = Tensor::<f32>::zeros(vec![1, height, width]);

    // Night sky: a dim blue-leaning vertical gradient; infrared sees a
    // flatter, slightly warmer background.
    let sky = [
        rng::gen_range_f32(&mut r, 0.02, 0.06),
        rng::gen_range_f32(&mut r, 0.03, 0.08),
        rng::gen_range_f32(&mut r, 0.06, 0.14),
    ];
    let ir_base = rng::gen_range_f32(&mut r, 0.08, 0.16);
    for y in 0..height {
        let fall = 1.0 - 0.5 * (y as f32 / height.max(1) as f32);
        for x in 0..width {
            for c in 0..3 {
                *vis.at3_mut(c, y, x) = sky[c] * fall;
            }
            *ir.at3_mut(0, y, x) = ir_base * (0.8 + 0.2 * fall);
        }
    }
    // Ground band along the bottom quarter.
    let horizon = height - height / 4;
    let ground = rng::gen_range_f32(&mut r, 0.05, 0.12);
    let ground_ir = rng::gen_range_f32(&mut r, 0.15, 0.3);
    for y in horizon..height {
        for x in 0..width {
            for c in 0..3 {
                *vis.at3_mut(c, y, x) = ground * (0.8 + 0.05 * (c as f32));
            }
            *ir.at3_mut(0, y, x) = ground_ir;
        }
    }

    // Boxy structures: dim in the visible band, bright in infrared (warm
    // interiors), so fusion has something to recover from each source.
    let structures = 3 + rng::gen_index(&mut r, 3);
    for _ in 0..structures {
        let h = height / 6 + rng::gen_index(&mut r, height / 4 + 1);
        let w = width / 8 + rng::gen_index(&mut r, width / 5 + 1);
        let top = horizon.saturating_sub(h);
        let left = rng::gen_index(&mut r, width.saturating_sub(w).max(1));
        let tone = rng::gen_range_f32(&mut r, 0.08, 0.25);
        let tint = rng::gen_range_f32(&mut r, 0.9, 1.1);
        let shape = Shape {
            top,
            left,
            h,
            w,
            rgb: [tone, tone * tint, tone * 0.95],
            ir: rng::gen_range_f32(&mut r, 0.45, 0.95),
        };
        paint(&mut vis, &shape, true);
        paint(&mut ir, &shape, false);
    }

    // Small light sources: bright and warm in the visible band, cool in
    // infrared.
    let lights = 4 + rng::gen_index(&mut r, 5);
    for _ in 0..lights {
        let s = 1 + rng::gen_index(&mut r, 3);
        let top = rng::gen_index(&mut r, height.saturating_sub(s).max(1));
        let left = rng::gen_index(&mut r, width.saturating_sub(s).max(1));
        let warm = rng::gen_range_f32(&mut r, 0.7, 1.0);
        let shape = Shape {
            top,
            left,
            h: s,
            w: s,
            rgb: [warm, warm * 0.85, warm * 0.6],
            ir: rng::gen_range_f32(&mut r, 0.1, 0.3),
        };
        paint(&mut vis, &shape, true);
        paint(&mut ir, &shape, false);
    }

    // Mild sensor noise on both modalities.
    for v in vis.data_mut() {
        *v += rng::gen_range_f32(&mut r, -0.01, 0.01);
    }
    for v in ir.data_mut() {
        *v += rng::gen_range_f32(&mut r, -0.01, 0.01);
    }

    Ok((Image::new(ColorSpace::Rgb, vis)?, Image::new(ColorSpace::Gray, ir)?))
}

/// Generates the dataset: PNGs under `out_dir/images` and a manifest at
/// `out_dir/manifest.jsonl`. Returns the manifest path.
pub fn generate(out_dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.pairs == 0 {
        bail!("--pairs must be >= 1");
    }
    if spec.train > spec.pairs {
        bail!("--train ({}) cannot exceed --pairs ({})", spec.train, spec.pairs);
    }
    if spec.height < 16 || spec.width < 16 {
        bail!("scene sides must be >= 16, got {}x{}", spec.height, spec.width);
    }
    spec.rain.validate()?;

    let mut entries = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let id = format!("pair{i:03}");
        let scene_seed = rng::derive_seed(spec.seed, "scene", i as u64);
        let (clean, infrared) = scene(spec.height, spec.width, scene_seed)?;
        let rain = spec.rain.for_pair(spec.seed, &id);
        let rainy = synthesize_rain(&clean, &rain)?;

        let rel_clean = PathBuf::from(format!("images/{id}_clean.png"));
        let rel_rainy = PathBuf::from(format!("images/{id}_rain.png"));
        let rel_ir = PathBuf::from(format!("images/{id}_ir.png"));
        pngio::write_png(&out_dir.join(&rel_clean), &clean)?;
        pngio::write_png(&out_dir.join(&rel_rainy), &rainy)?;
        pngio::write_png(&out_dir.join(&rel_ir), &infrared)?;

        entries.push(ManifestEntry {
            id,
            visible: rel_rainy,
            infrared: rel_ir,
            clean: Some(rel_clean),
            split: if i < spec.train { Split::Train } else { Split::Test },
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::save(&manifest_path, &entries)?;
    Ok(manifest_path)
}
