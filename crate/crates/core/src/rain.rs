//! Parametric rain-plus-low-light degradation.
//!
//! This is a documented stand-in for an external raindrop synthesis method,
//! not a reproduction of one. The model: the clean image is globally dimmed
//! by `dim_factor`, then a sparse additive streak layer is blended on top.
//! Streaks are bright anti-aliased line segments sharing one angle per image
//! (rain within a single exposure has a dominant direction), softened by a
//! truncated Gaussian blur. Outside the blurred streak support the layer is
//! exactly zero, so the degradation never brightens the background.
//!
//! Rendering order per streak, all draws from one ChaCha8 stream seeded by
//! `params.seed`: center x, center y, brightness jitter in `[0.6, 1.0]`.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::rng;
use crate::tensor::Tensor;

/// Streak-field and dimming parameters. `angle` is degrees from vertical;
/// `intensity` scales streak brightness; `dim_factor` multiplies the clean
/// image before blending.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RainParams {
    pub streak_count: usize,
    pub streak_length: usize,
    pub angle_deg: f32,
    pub intensity: f32,
    pub blur_sigma: f32,
    pub dim_factor: f32,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            streak_count: 120,
            streak_length: 9,
            angle_deg: 12.0,
            intensity: 0.55,
            blur_sigma: 0.6,
            dim_factor: 0.45,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::config("intensity must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dim_factor) {
            return Err(Error::config("dim_factor must be in [0, 1]"));
        }
        if self.streak_length < 1 {
            return Err(Error::config("streak_length must be at least 1"));
        }
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(Error::config("blur_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Child params with a per-pair seed derived from (`root`, pair id).
    pub fn for_pair(&self, root_seed: u64, pair_id: &str) -> RainParams {
        let mut p = self.clone();
        p.seed = rng::derive_seed(root_seed, pair_id, 0);
        p
    }
}

/// Renders the additive streak layer alone (single channel, `[1, h, w]`).
/// Exposed so tests and diagnostics can inspect the streak support.
pub fn rain_layer(params: &RainParams, h: usize, w: usize) -> Tensor<f32> {
    let mut layer = Tensor::map(1, h, w);
    if params.streak_count == 0 || params.intensity == 0.0 {
        return layer;
    }
    let mut r = rng::seeded(params.seed);
    let theta = params.angle_deg.to_radians();
    // direction from vertical: x drifts by sin, y by cos
    let (dx, dy) = (theta.sin(), theta.cos());
    let len = params.streak_length as f32;
    for _ in 0..params.streak_count {
        let cx = rng::gen_index(&mut r, w) as f32;
        let cy = rng::gen_index(&mut r, h) as f32;
        let b = params.intensity * rng::gen_range_f32(&mut r, 0.6, 1.0);
        let steps = (len.ceil() as usize).max(1) * 2;
        for s in 0..=steps {
            let t = (s as f32 / steps as f32 - 0.5) * len;
            splat(layer.plane_mut(0), h, w, cx + t * dx, cy + t * dy, b / 2.0);
        }
    }
    if params.blur_sigma > 0.0 {
        gaussian_blur_plane(&mut layer, params.blur_sigma);
    }
    layer
}

/// Bilinear accumulation of `v` at the fractional position (`x`, `y`).
fn splat(plane: &mut [f32], h: usize, w: usize, x: f32, y: f32, v: f32) {
    if x < -1.0 || y < -1.0 || x >= w as f32 || y >= h as f32 {
        return;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let mut put = |yy: isize, xx: isize, weight: f32| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize] += v * weight;
        }
    };
    put(yi, xi, (1.0 - fx) * (1.0 - fy));
    put(yi, xi + 1, fx * (1.0 - fy));
    put(yi + 1, xi, (1.0 - fx) * fy);
    put(yi + 1, xi + 1, fx * fy);
}

/// Separable Gaussian blur truncated at 3 sigma, zero padding. Zero stays
/// exactly zero outside the kernel reach of any nonzero sample.
fn gaussian_blur_plane(layer: &mut Tensor<f32>, sigma: f32) {
    let (h, w) = layer.hw();
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let src = layer.plane(0).to_vec();
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let dst = layer.plane_mut(0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Applies `clamp(dim_factor * clean + streaks)` channel-wise.
pub fn synthesize_rain(clean: &Image, params: &RainParams) -> Result<Image> {
    if clean.color_space() != ColorSpace::Rgb {
        return Err(Error::InvalidColorSpace {
            expected: "RGB",
            got: clean.color_space().name(),
        });
    }
    params.validate()?;
    let (h, w) = clean.size();
    let layer = rain_layer(params, h, w);
    let mut out = Tensor::map(3, h, w);
    for c in 0..3 {
        let src = clean.tensor().plane(c);
        let streaks = layer.plane(0);
        let dst = out.plane_mut(c);
        for i in 0..h * w {
            dst[i] = (params.dim_factor * src[i] + streaks[i]).clamp(0.0, 1.0);
        }
    }
    Image::new(ColorSpace::Rgb, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::map(3, h, w);
        for v in t.data_mut() {
            *v = 0.1 + 0.6 * rng::gen_unit_f32(&mut r);
        }
        Image::new(ColorSpace::Rgb, t).unwrap()
    }

    #[test]
    fn no_streaks_no_dimming_is_identity() {
        let img = test_image(24, 24, 1);
        let params = RainParams {
            streak_count: 0,
            dim_factor: 1.0,
            ..RainParams::default()
        };
        let out = synthesize_rain(&img, &params).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn pure_dimming_scales_every_sample() {
        let img = test_image(16, 16, 2);
        let params = RainParams {
            streak_count: 0,
            dim_factor: 0.5,
            ..RainParams::default()
        };
        let out = synthesize_rain(&img, &params).unwrap();
        for (o, i) in out.tensor().data().iter().zip(img.tensor().data()) {
            assert!((o - 0.5 * i).abs() < 1e-7);
        }
    }

    #[test]
    fn streaks_brighten_masked_pixels_over_dimmed_input() {
        let img = test_image(64, 64, 3);
        let params = RainParams {
            seed: 17,
            ..RainParams::default()
        };
        let out = synthesize_rain(&img, &params).unwrap();
        let layer = rain_layer(&params, 64, 64);
        let mut masked = 0usize;
        let (mut mean_out, mut mean_dim) = (0.0f64, 0.0f64);
        for i in 0..64 * 64 {
            if layer.plane(0)[i] > 1e-4 {
                masked += 1;
                let lum_out: f32 = (0..3).map(|c| out.tensor().plane(c)[i]).sum();
                let lum_dim: f32 = (0..3)
                    .map(|c| params.dim_factor * img.tensor().plane(c)[i])
                    .sum();
                mean_out += lum_out as f64;
                mean_dim += lum_dim as f64;
            }
        }
        assert!(masked > 100, "streak mask unexpectedly small: {masked}");
        assert!(mean_out / masked as f64 > mean_dim / masked as f64);
    }

    #[test]
    fn background_never_brightens_off_the_streak_support() {
        let img = test_image(48, 48, 4);
        let params = RainParams {
            seed: 23,
            ..RainParams::default()
        };
        let out = synthesize_rain(&img, &params).unwrap();
        let layer = rain_layer(&params, 48, 48);
        for i in 0..48 * 48 {
            if layer.plane(0)[i] == 0.0 {
                for c in 0..3 {
                    let dimmed = params.dim_factor * img.tensor().plane(c)[i];
                    assert!(out.tensor().plane(c)[i] <= dimmed + 1e-6);
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_identical_output() {
        let img = test_image(32, 32, 5);
        let params = RainParams {
            seed: 99,
            ..RainParams::default()
        };
        let a = synthesize_rain(&img, &params).unwrap();
        let b = synthesize_rain(&img, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_pair_seeds_differ_by_id() {
        let base = RainParams::default();
        let a = base.for_pair(7, "pair-001");
        let b = base.for_pair(7, "pair-002");
        assert_ne!(a.seed, b.seed);
        assert_eq!(a.seed, base.for_pair(7, "pair-001").seed);
    }
}
