//! Structural similarity and its multi-scale extension on double planes.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::losses::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::metrics::check_same;
use crate::tensor::Tensor;

/// Contribution of each scale of the multi-scale score, coarsest last.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn fitted(h: usize, w: usize) -> usize {
    let side = h.min(w).min(SSIM_WINDOW);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

/// Mean structural similarity and mean contrast-structure term over all
/// fully interior windows.
fn ssim_and_cs(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(f64, f64)> {
    let (h, w) = check_same(a, b)?;
    let k = fitted(h, w);
    let win: Tensor<f64> = gaussian_window(k, SSIM_SIGMA);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..k {
                for kx in 0..k {
                    let g = win.at2(ky, kx);
                    let x = a.at2(oy + ky, ox + kx);
                    let y = b.at2(oy + ky, ox + kx);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
            let lum = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            ssim_sum += lum * cs;
            cs_sum += cs;
        }
    }
    let n = (oh * ow) as f64;
    Ok((ssim_sum / n, cs_sum / n))
}

/// Mean structural similarity. 1.0 exactly on identical inputs; the window
/// shrinks to fit planes smaller than 11 on a side.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(ssim_and_cs(a, b)?.0)
}

fn downsample2(t: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(alloc::vec![oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let s = t.at2(2 * y, 2 * x)
                + t.at2(2 * y, 2 * x + 1)
                + t.at2(2 * y + 1, 2 * x)
                + t.at2(2 * y + 1, 2 * x + 1);
            *out.at2_mut(y, x) = 0.25 * s;
        }
    }
    out
}

/// Multi-scale structural similarity. The scale count is chosen so the
/// coarsest plane still fits an 11x11 window (at least one, at most five),
/// and the canonical five-scale weights are renormalized over the scales
/// actually used. Contrast-structure means are floored at zero so the
/// fractional powers stay real.
pub fn ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_same(a, b)?;
    let ratio = h.min(w) as f64 / SSIM_WINDOW as f64;
    let scales = if ratio < 2.0 {
        1
    } else {
        (1 + ratio.log2().floor() as usize).min(MS_SSIM_WEIGHTS.len())
    };
    let weight_sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();

    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut score = 1.0;
    for (s, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (ssim_m, cs_m) = ssim_and_cs(&cur_a, &cur_b)?;
        let term = if s + 1 == scales { ssim_m } else { cs_m }.max(0.0);
        score *= term.powf(weight / weight_sum);
        if s + 1 != scales {
            cur_a = downsample2(&cur_a);
            cur_b = downsample2(&cur_b);
        }
    }
    Ok(score)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::metrics::tests::random_plane;

    #[test]
    fn identity_scores_exactly_one() {
        let a = random_plane(24, 24, 21);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn both_scores_are_symmetric() {
        let a = random_plane(32, 24, 22);
        let b = random_plane(32, 24, 23);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-10);
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn degradation_lowers_both_scores_monotonically() {
        let base = smooth_plane(48, 48);
        let mut prev_ssim = 1.0;
        let mut prev_ms = 1.0;
        for (i, sigma) in [0.02, 0.08, 0.2].iter().enumerate() {
            let noisy = perturb(&base, *sigma, 30 + i as u64);
            let s = ssim(&base, &noisy).unwrap();
            let m = ms_ssim(&base, &noisy).unwrap();
            assert!(s < prev_ssim, "ssim not decreasing at sigma {sigma}: {s}");
            assert!(m < prev_ms, "ms-ssim not decreasing at sigma {sigma}: {m}");
            prev_ssim = s;
            prev_ms = m;
        }
    }

    #[test]
    fn small_planes_fall_back_to_a_single_fitting_scale() {
        let a = random_plane(7, 9, 24);
        let b = random_plane(7, 9, 25);
        let s = ssim(&a, &b).unwrap();
        let m = ms_ssim(&a, &b).unwrap();
        assert!(s.is_finite() && m.is_finite());
        // One scale with full weight means the two scores coincide when the
        // single-scale value is non-negative.
        assert!((m - s.max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_plausible_range_on_noise() {
        for seed in 40..44 {
            let a = random_plane(33, 29, seed);
            let b = random_plane(33, 29, seed + 100);
            let s = ssim(&a, &b).unwrap();
            let m = ms_ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            assert!((0.0..=1.0).contains(&m));
        }
    }

    pub(crate) fn smooth_plane(h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(alloc::vec![h, w]);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.25 * (core::f64::consts::TAU * y as f64 / h as f64).sin()
                    + 0.2 * (core::f64::consts::TAU * x as f64 / w as f64).cos();
                *t.at2_mut(y, x) = v.clamp(0.0, 1.0);
            }
        }
        t
    }

    pub(crate) fn perturb(base: &Tensor<f64>, sigma: f64, seed: u64) -> Tensor<f64> {
        let mut r = crate::rng::seeded(seed);
        let mut out = base.clone();
        for v in out.data_mut() {
            *v = (*v + sigma * crate::rng::gen_normal_f64(&mut r)).clamp(0.0, 1.0);
        }
        out
    }
}
