//! Training objectives for both stages.
//!
//! Stage 1 minimizes a mean-absolute reconstruction loss against the clean
//! target. Stage 2 balances structural similarity and intensity agreement
//! between the fused plane and its two weighted sources, and refinement adds
//! a smoothness penalty on the learned adjustment map plus a local-mean
//! consistency term between the fused and refined planes. All losses are
//! element-count normalized so values are comparable across image sizes.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::fusionnet::FusionWeights;
use crate::tensor::Tensor;
use crate::Scalar;

/// A scalar objective plus its named sub-terms (still on the tape, so both
/// the total and any component can be differentiated or read out).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: Var,
    pub components: Vec<(&'static str, Var)>,
}

impl LossValue {
    /// Reads the total and every component as plain numbers for logging.
    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> (f64, Vec<(&'static str, f64)>) {
        let total = tape.scalar_value(self.value);
        let parts =
            self.components.iter().map(|(n, v)| (*n, tape.scalar_value(*v))).collect();
        (total, parts)
    }

    pub fn component(&self, name: &str) -> Option<Var> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// Normalized 2-d Gaussian window, `[k, k]` with entries summing to 1.
pub fn gaussian_window<T: Scalar>(k: usize, sigma: f64) -> Tensor<T> {
    assert!(k % 2 == 1 && k >= 1, "window size must be odd");
    assert!(sigma > 0.0);
    let c = (k / 2) as f64;
    let mut vals = Vec::with_capacity(k * k);
    let mut sum = 0.0;
    for y in 0..k {
        for x in 0..k {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            sum += v;
            vals.push(v);
        }
    }
    Tensor::from_vec(
        alloc::vec![k, k],
        vals.into_iter().map(|v| T::of_f64(v / sum)).collect(),
    )
}

/// Shared similarity-window parameters: 11x11 Gaussian, sigma 1.5, shrunk to
/// the largest odd size that fits the image.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for dynamic range 1: (0.01)^2 and (0.03)^2.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

pub(crate) fn fitted_window(h: usize, w: usize) -> usize {
    let side = h.min(w).min(SSIM_WINDOW);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

fn check_same_planes<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Result<(usize, usize)> {
    let first = tape.dims(vars[0]).to_vec();
    if first.len() != 3 || first[0] != 1 {
        return Err(Error::dimension(alloc::format!(
            "expected single-channel [1, h, w] planes, got {first:?}"
        )));
    }
    for v in &vars[1..] {
        if tape.dims(*v) != first {
            return Err(Error::dimension(alloc::format!(
                "plane shape mismatch: {:?} vs {first:?}",
                tape.dims(*v)
            )));
        }
    }
    Ok((first[1], first[2]))
}

fn check_weights(weights: &FusionWeights) -> Result<()> {
    if !weights.visible.is_finite() || !weights.infrared.is_finite() {
        return Err(Error::numeric(alloc::format!("non-finite blend weights: {weights:?}")));
    }
    Ok(())
}

/// Mean structural similarity between two planes on the tape; windows are
/// taken at valid positions only.
pub fn ssim_mean<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (h, w) = check_same_planes(tape, &[a, b])?;
    let k = fitted_window(h, w);
    let g: Tensor<T> = gaussian_window(k, SSIM_SIGMA);
    let c1 = T::of_f64(SSIM_C1);
    let c2 = T::of_f64(SSIM_C2);

    let mu_a = tape.depthwise_fixed(a, g.clone(), PadMode::Valid, 1);
    let mu_b = tape.depthwise_fixed(b, g.clone(), PadMode::Valid, 1);
    let aa = tape.mul(a, a);
    let ab = tape.mul(a, b);
    let bb = tape.mul(b, b);
    let e_aa = tape.depthwise_fixed(aa, g.clone(), PadMode::Valid, 1);
    let e_ab = tape.depthwise_fixed(ab, g.clone(), PadMode::Valid, 1);
    let e_bb = tape.depthwise_fixed(bb, g, PadMode::Valid, 1);

    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_ab = tape.mul(mu_a, mu_b);
    let mu_bb = tape.mul(mu_b, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let cov = tape.sub(e_ab, mu_ab);
    let var_b = tape.sub(e_bb, mu_bb);

    let two_mu = tape.mul_scalar(mu_ab, T::of_f64(2.0));
    let num1 = tape.add_scalar(two_mu, c1);
    let two_cov = tape.mul_scalar(cov, T::of_f64(2.0));
    let num2 = tape.add_scalar(two_cov, c2);
    let mu_sum = tape.add(mu_aa, mu_bb);
    let den1 = tape.add_scalar(mu_sum, c1);
    let var_sum = tape.add(var_a, var_b);
    let den2 = tape.add_scalar(var_sum, c2);

    let num = tape.mul(num1, num2);
    let den = tape.mul(den1, den2);
    let map = tape.div(num, den);
    Ok(tape.mean_all(map))
}

fn mse_mean<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// Mean absolute difference between a reconstruction and its target.
pub fn clean_loss<T: Scalar>(tape: &mut Tape<T>, output: Var, target: Var) -> Result<LossValue> {
    if tape.dims(output) != tape.dims(target) {
        return Err(Error::dimension(alloc::format!(
            "clean loss shape mismatch: {:?} vs {:?}",
            tape.dims(output),
            tape.dims(target)
        )));
    }
    let d = tape.sub(output, target);
    let a = tape.abs(d);
    let value = tape.mean_all(a);
    Ok(LossValue { value, components: alloc::vec![("l1", value)] })
}

/// Weighted structural dissimilarity of the fused plane against both
/// sources: `w_vis * (1 - SSIM(y_clean, fused)) + w_ir * (1 - SSIM(ir, fused))`.
pub fn ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_clean: Var,
    y_fused: Var,
    infrared: Var,
    weights: &FusionWeights,
) -> Result<LossValue> {
    check_same_planes(tape, &[y_clean, y_fused, infrared])?;
    check_weights(weights)?;
    let s_vis = ssim_mean(tape, y_clean, y_fused)?;
    let s_ir = ssim_mean(tape, infrared, y_fused)?;
    let d_vis = tape.mul_scalar(s_vis, T::of_f64(-1.0));
    let d_vis = tape.add_scalar(d_vis, T::one());
    let d_ir = tape.mul_scalar(s_ir, T::of_f64(-1.0));
    let d_ir = tape.add_scalar(d_ir, T::one());
    let wv = tape.mul_scalar(d_vis, T::of_f64(weights.visible));
    let wi = tape.mul_scalar(d_ir, T::of_f64(weights.infrared));
    let value = tape.add(wv, wi);
    Ok(LossValue { value, components: alloc::vec![("visible", d_vis), ("infrared", d_ir)] })
}

/// Weighted intensity mismatch:
/// `w_vis * MSE(y_clean, fused) + w_ir * MSE(ir, fused)`.
pub fn mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_clean: Var,
    y_fused: Var,
    infrared: Var,
    weights: &FusionWeights,
) -> Result<LossValue> {
    check_same_planes(tape, &[y_clean, y_fused, infrared])?;
    check_weights(weights)?;
    let m_vis = mse_mean(tape, y_clean, y_fused);
    let m_ir = mse_mean(tape, infrared, y_fused);
    let wv = tape.mul_scalar(m_vis, T::of_f64(weights.visible));
    let wi = tape.mul_scalar(m_ir, T::of_f64(weights.infrared));
    let value = tape.add(wv, wi);
    Ok(LossValue { value, components: alloc::vec![("visible", m_vis), ("infrared", m_ir)] })
}

/// Full fusion objective: structural term plus `alpha` times the intensity
/// term.
pub fn fusion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_clean: Var,
    y_fused: Var,
    infrared: Var,
    weights: &FusionWeights,
    alpha: f64,
) -> Result<LossValue> {
    if !(alpha > 0.0) {
        return Err(Error::config(alloc::format!("alpha must be positive, got {alpha}")));
    }
    let ssim = ssim_loss(tape, y_clean, y_fused, infrared, weights)?;
    let mse = mse_loss(tape, y_clean, y_fused, infrared, weights)?;
    let scaled = tape.mul_scalar(mse.value, T::of_f64(alpha));
    let value = tape.add(ssim.value, scaled);
    Ok(LossValue {
        value,
        components: alloc::vec![("ssim", ssim.value), ("mse", mse.value)],
    })
}

/// Refinement objective: smoothness of the learned adjustment map plus
/// `beta` times the consistency of 4x4 local means between the fused plane
/// and its refinement.
pub fn refinement_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fused: Var,
    refined: Var,
    adjust_map: Var,
    beta: f64,
) -> Result<LossValue> {
    if !(beta > 0.0) {
        return Err(Error::config(alloc::format!("beta must be positive, got {beta}")));
    }
    let (h, w) = check_same_planes(tape, &[fused, refined, adjust_map])?;
    if h < 4 || w < 4 {
        return Err(Error::dimension(alloc::format!(
            "consistency pooling needs at least 4x4 planes, got {h}x{w}"
        )));
    }
    let smoothness = tape.smoothness_tv(adjust_map);
    let pf = tape.avg_pool_block(fused, 4);
    let pr = tape.avg_pool_block(refined, 4);
    let consistency = mse_mean(tape, pf, pr);
    let scaled = tape.mul_scalar(consistency, T::of_f64(beta));
    let value = tape.add(smoothness, scaled);
    Ok(LossValue {
        value,
        components: alloc::vec![("smoothness", smoothness), ("consistency", consistency)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::zeros(alloc::vec![1, h, w]);
        for v in t.data_mut() {
            *v = rng::gen_unit_f64(&mut r);
        }
        t
    }

    fn smooth_plane(h: usize, w: usize, phase: f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(alloc::vec![1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.4 * ((x as f64 / w as f64 + phase) * core::f64::consts::PI).sin()
                        * (y as f64 / h as f64 * core::f64::consts::PI).cos();
                t.data_mut()[y * w + x] = v.clamp(0.0, 1.0);
            }
        }
        t
    }

    /// Independent valid-window Gaussian SSIM written with direct loops.
    fn reference_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (a.dims()[1], a.dims()[2]);
        let k = fitted_window(h, w);
        let g: Tensor<f64> = gaussian_window(k, SSIM_SIGMA);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut maa, mut mab, mut mbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..k {
                    for kx in 0..k {
                        let gv = g.data()[ky * k + kx];
                        let av = a.data()[(oy + ky) * w + ox + kx];
                        let bv = b.data()[(oy + ky) * w + ox + kx];
                        ma += gv * av;
                        mb += gv * bv;
                        maa += gv * av * av;
                        mab += gv * av * bv;
                        mbb += gv * bv * bv;
                    }
                }
                let (va, vb, cab) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total / (oh * ow) as f64
    }

    #[test]
    fn clean_loss_is_zero_on_identical_images_and_one_on_opposites() {
        let mut tape = Tape::new();
        let a = tape.leaf(random_plane(6, 6, 1));
        let l = clean_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.scalar_value(l.value), 0.0);

        let zeros = tape.leaf(Tensor::filled(alloc::vec![1, 4, 4], 0.0));
        let ones = tape.leaf(Tensor::filled(alloc::vec![1, 4, 4], 1.0));
        let l = clean_loss(&mut tape, zeros, ones).unwrap();
        assert_eq!(tape.scalar_value(l.value), 1.0);
    }

    #[test]
    fn clean_loss_matches_a_double_loop_mean() {
        let a = random_plane(5, 7, 2);
        let b = random_plane(5, 7, 3);
        let want: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 35.0;
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let l = clean_loss(&mut tape, av, bv).unwrap();
        assert!((tape.scalar_value(l.value) - want).abs() < 1e-7);
    }

    #[test]
    fn ssim_loss_vanishes_when_everything_coincides() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_plane(16, 16, 4));
        let l = ssim_loss(&mut tape, x, x, x, &FusionWeights::balanced()).unwrap();
        assert_eq!(tape.scalar_value(l.value), 0.0);
    }

    #[test]
    fn fully_visible_weighting_ignores_the_infrared_term() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_plane(16, 16, 5));
        let ir = tape.leaf(random_plane(16, 16, 6));
        let w = FusionWeights { visible: 1.0, infrared: 0.0 };
        let l = ssim_loss(&mut tape, x, x, ir, &w).unwrap();
        assert_eq!(tape.scalar_value(l.value), 0.0);
    }

    #[test]
    fn tape_ssim_matches_the_reference_transcription() {
        let a = smooth_plane(16, 16, 0.0);
        let b = random_plane(16, 16, 7);
        let want = reference_ssim(&a, &b);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let got = ssim_mean(&mut tape, av, bv).unwrap();
        assert!((tape.scalar_value(got) - want).abs() < 1e-5);
    }

    #[test]
    fn small_images_shrink_the_window_and_stay_finite() {
        let a = random_plane(8, 8, 8);
        let b = random_plane(8, 8, 9);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let s = ssim_mean(&mut tape, av, bv).unwrap();
        let v = tape.scalar_value(s);
        assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
    }

    #[test]
    fn mse_loss_hits_the_symmetric_midpoint_value() {
        let mut tape = Tape::new();
        let yc = tape.leaf(Tensor::filled(alloc::vec![1, 8, 8], 0.0));
        let ir = tape.leaf(Tensor::filled(alloc::vec![1, 8, 8], 1.0));
        let f = tape.leaf(Tensor::filled(alloc::vec![1, 8, 8], 0.5));
        let l = mse_loss(&mut tape, yc, f, ir, &FusionWeights::balanced()).unwrap();
        assert!((tape.scalar_value(l.value) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mse_loss_is_invariant_under_source_swap() {
        let a = random_plane(9, 9, 10);
        let b = random_plane(9, 9, 11);
        let f = random_plane(9, 9, 12);
        let w = FusionWeights { visible: 0.7, infrared: 0.3 };
        let sw = FusionWeights { visible: 0.3, infrared: 0.7 };
        let mut tape = Tape::new();
        let (av, bv, fv) = (tape.leaf(a), tape.leaf(b), tape.leaf(f));
        let l1 = mse_loss(&mut tape, av, fv, bv, &w).unwrap();
        let l2 = mse_loss(&mut tape, bv, fv, av, &sw).unwrap();
        assert!((tape.scalar_value(l1.value) - tape.scalar_value(l2.value)).abs() < 1e-12);
    }

    #[test]
    fn mse_loss_matches_brute_force() {
        let a = random_plane(6, 5, 13);
        let b = random_plane(6, 5, 14);
        let f = random_plane(6, 5, 15);
        let w = FusionWeights { visible: 0.6, infrared: 0.4 };
        let brute = |x: &Tensor<f64>| {
            x.data().iter().zip(f.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 30.0
        };
        let want = 0.6 * brute(&a) + 0.4 * brute(&b);
        let mut tape = Tape::new();
        let (av, bv, fv) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(f.clone()));
        let l = mse_loss(&mut tape, av, fv, bv, &w).unwrap();
        assert!((tape.scalar_value(l.value) - want).abs() < 1e-7);
    }

    #[test]
    fn fusion_loss_is_the_documented_combination_of_its_parts() {
        let mut tape = Tape::new();
        let a = tape.leaf(smooth_plane(16, 16, 0.1));
        let b = tape.leaf(smooth_plane(16, 16, 0.6));
        let f = tape.leaf(random_plane(16, 16, 16));
        let w = FusionWeights { visible: 0.55, infrared: 0.45 };
        let l = fusion_loss(&mut tape, a, f, b, &w, 20.0).unwrap();
        let (total, parts) = l.read(&tape);
        let ssim_term = parts.iter().find(|(n, _)| *n == "ssim").unwrap().1;
        let mse_term = parts.iter().find(|(n, _)| *n == "mse").unwrap().1;
        assert!((total - (ssim_term + 20.0 * mse_term)).abs() < 1e-12);
        assert!(total >= 0.0);
    }

    #[test]
    fn fusion_loss_decreases_along_the_segment_toward_the_weighted_blend() {
        let a = smooth_plane(16, 16, 0.0);
        let b = smooth_plane(16, 16, 0.5);
        let w = FusionWeights { visible: 0.5, infrared: 0.5 };
        let start = random_plane(16, 16, 17);
        let mut last = f64::INFINITY;
        for lambda in [1.0, 0.5, 0.25] {
            let mut fused = Tensor::<f64>::zeros(alloc::vec![1, 16, 16]);
            for i in 0..256 {
                let blend = w.visible * a.data()[i] + w.infrared * b.data()[i];
                fused.data_mut()[i] = blend + lambda * (start.data()[i] - blend);
            }
            let mut tape = Tape::new();
            let (av, bv, fv) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(fused));
            let l = fusion_loss(&mut tape, av, fv, bv, &w, 20.0).unwrap();
            let v = tape.scalar_value(l.value);
            assert!(v < last, "loss {v} did not decrease from {last} at lambda {lambda}");
            last = v;
        }
    }

    #[test]
    fn refinement_loss_vanishes_on_a_constant_map_and_equal_planes() {
        let mut tape = Tape::new();
        let f = tape.leaf(random_plane(8, 8, 18));
        let a = tape.leaf(Tensor::filled(alloc::vec![1, 8, 8], 0.5));
        let l = refinement_loss(&mut tape, f, f, a, 1.5).unwrap();
        assert_eq!(tape.scalar_value(l.value), 0.0);
    }

    #[test]
    fn smoothness_term_matches_the_hand_computed_step_edge() {
        // Column step: right half one, left half zero, on an 8x8 map.
        // Per row one horizontal unit jump; 8 rows -> sum 8; normalized by 64.
        let mut edge = Tensor::<f64>::zeros(alloc::vec![1, 8, 8]);
        for y in 0..8 {
            for x in 4..8 {
                edge.data_mut()[y * 8 + x] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let f = tape.leaf(random_plane(8, 8, 19));
        let av = tape.leaf(edge);
        let l = refinement_loss(&mut tape, f, f, av, 1.5).unwrap();
        let (total, parts) = l.read(&tape);
        let smo = parts.iter().find(|(n, _)| *n == "smoothness").unwrap().1;
        assert!((smo - 8.0 / 64.0).abs() < 1e-12);
        assert!((total - smo).abs() < 1e-12, "consistency term must be zero here");
    }

    #[test]
    fn refinement_loss_is_the_documented_combination_of_its_parts() {
        let mut tape = Tape::new();
        let f = tape.leaf(random_plane(12, 12, 20));
        let r = tape.leaf(random_plane(12, 12, 21));
        let a = tape.leaf(random_plane(12, 12, 22));
        let l = refinement_loss(&mut tape, f, r, a, 1.5).unwrap();
        let (total, parts) = l.read(&tape);
        let smo = parts.iter().find(|(n, _)| *n == "smoothness").unwrap().1;
        let con = parts.iter().find(|(n, _)| *n == "consistency").unwrap().1;
        assert!((total - (smo + 1.5 * con)).abs() < 1e-12);
        assert!(smo >= 0.0 && con >= 0.0);
    }

    #[test]
    fn shape_mismatches_and_bad_scales_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(random_plane(8, 8, 23));
        let b = tape.leaf(random_plane(8, 9, 24));
        assert!(clean_loss(&mut tape, a, b).is_err());
        assert!(ssim_loss(&mut tape, a, b, a, &FusionWeights::balanced()).is_err());
        assert!(fusion_loss(&mut tape, a, a, a, &FusionWeights::balanced(), 0.0).is_err());
        assert!(refinement_loss(&mut tape, a, a, a, 0.0).is_err());
        let tiny = tape.leaf(random_plane(3, 3, 25));
        assert!(refinement_loss(&mut tape, tiny, tiny, tiny, 1.0).is_err());
    }
}
