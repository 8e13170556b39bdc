//! Feature mutual information between a fused image and its sources.
//!
//! The planes are tiled into non-overlapping 8x8 windows (edge remainders
//! ignored). Per window a feature vector is extracted, quantized to 256
//! levels, and the normalized mutual information `2 I(a; f) / (H(a) + H(f))`
//! between source-window and fused-window features is computed. The score
//! for a source is the mean over windows, and the reported value averages
//! the two sources. Windows whose features are degenerate (constant) score
//! 1 when both sides are degenerate and 0 when only one is.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::{check_same, quantize, DEFAULT_BINS};
use crate::tensor::Tensor;

const WIN: usize = 8;
const FLAT_EPS: f64 = 1e-12;

/// Feature extracted from each 8x8 window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmiFeature {
    /// Raw intensities, quantized on the global 0..1 range.
    Pixel,
    /// Orthonormal 8x8 DCT-II coefficients, min-max normalized per window.
    Dct,
    /// Single-level Haar detail bands (horizontal, vertical, diagonal;
    /// 48 values), min-max normalized per window.
    Wavelet,
}

fn window_values(plane: &Tensor<f64>, y0: usize, x0: usize) -> [f64; WIN * WIN] {
    let mut w = [0.0; WIN * WIN];
    for y in 0..WIN {
        for x in 0..WIN {
            w[y * WIN + x] = plane.at2(y0 + y, x0 + x);
        }
    }
    w
}

fn dct8x8(w: &[f64; WIN * WIN]) -> Vec<f64> {
    // Orthonormal DCT-II basis: alpha(0) = sqrt(1/8), alpha(u>0) = 1/2.
    let mut basis = [[0.0f64; WIN]; WIN];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, b) in row.iter_mut().enumerate() {
            *b = alpha
                * (core::f64::consts::PI * (2.0 * x as f64 + 1.0) * u as f64 / 16.0).cos();
        }
    }
    let mut out = Vec::with_capacity(WIN * WIN);
    for u in 0..WIN {
        for v in 0..WIN {
            let mut s = 0.0;
            for y in 0..WIN {
                for x in 0..WIN {
                    s += basis[u][y] * basis[v][x] * w[y * WIN + x];
                }
            }
            out.push(s);
        }
    }
    out
}

fn haar_details(w: &[f64; WIN * WIN]) -> Vec<f64> {
    let half = WIN / 2;
    let mut out = Vec::with_capacity(3 * half * half);
    for band in 0..3 {
        for by in 0..half {
            for bx in 0..half {
                let a = w[(2 * by) * WIN + 2 * bx];
                let b = w[(2 * by) * WIN + 2 * bx + 1];
                let c = w[(2 * by + 1) * WIN + 2 * bx];
                let d = w[(2 * by + 1) * WIN + 2 * bx + 1];
                out.push(match band {
                    0 => 0.5 * (a - b + c - d),
                    1 => 0.5 * (a + b - c - d),
                    _ => 0.5 * (a - b - c + d),
                });
            }
        }
    }
    out
}

/// Quantized feature vector of one window, or `None` when it is degenerate.
fn quantized_features(
    plane: &Tensor<f64>,
    y0: usize,
    x0: usize,
    feature: FmiFeature,
) -> Option<Vec<usize>> {
    let raw = window_values(plane, y0, x0);
    let vals: Vec<f64> = match feature {
        FmiFeature::Pixel => raw.to_vec(),
        FmiFeature::Dct => dct8x8(&raw),
        FmiFeature::Wavelet => haar_details(&raw),
    };
    match feature {
        FmiFeature::Pixel => {
            let q: Vec<usize> = vals.iter().map(|v| quantize(*v, DEFAULT_BINS)).collect();
            if q.iter().all(|b| *b == q[0]) {
                None
            } else {
                Some(q)
            }
        }
        _ => {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < FLAT_EPS {
                return None;
            }
            Some(
                vals.iter()
                    .map(|v| quantize((v - lo) / (hi - lo), DEFAULT_BINS))
                    .collect(),
            )
        }
    }
}

fn nmi(a: &[usize], b: &[usize]) -> f64 {
    // I(A;B) = H(A) + H(B) - H(A,B); identical count multisets then cancel
    // exactly, so matching features score precisely 1.
    let n = a.len() as f64;
    let mut joint: alloc::collections::BTreeMap<(usize, usize), u32> =
        alloc::collections::BTreeMap::new();
    let mut ha: alloc::collections::BTreeMap<usize, u32> = alloc::collections::BTreeMap::new();
    let mut hb: alloc::collections::BTreeMap<usize, u32> = alloc::collections::BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((*x, *y)).or_insert(0) += 1;
        *ha.entry(*x).or_insert(0) += 1;
        *hb.entry(*y).or_insert(0) += 1;
    }
    let entropy = |counts: alloc::vec::Vec<u32>| -> f64 {
        counts
            .iter()
            .map(|c| {
                let p = *c as f64 / n;
                -p * p.log2()
            })
            .sum()
    };
    let ent_a = entropy(ha.values().copied().collect());
    let ent_b = entropy(hb.values().copied().collect());
    let ent_joint = entropy(joint.values().copied().collect());
    let mi = (ent_a + ent_b - ent_joint).max(0.0);
    (2.0 * mi / (ent_a + ent_b)).clamp(0.0, 1.0)
}

fn source_score(src: &Tensor<f64>, fused: &Tensor<f64>, feature: FmiFeature) -> f64 {
    let (h, w) = (src.dims()[0], src.dims()[1]);
    let (wy, wx) = (h / WIN, w / WIN);
    let mut sum = 0.0;
    for by in 0..wy {
        for bx in 0..wx {
            let fa = quantized_features(src, by * WIN, bx * WIN, feature);
            let ff = quantized_features(fused, by * WIN, bx * WIN, feature);
            sum += match (fa, ff) {
                (None, None) => 1.0,
                (None, Some(_)) | (Some(_), None) => 0.0,
                (Some(a), Some(f)) => nmi(&a, &f),
            };
        }
    }
    sum / (wy * wx) as f64
}

/// Feature mutual information of `fused` against both sources.
pub fn fmi(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    fused: &Tensor<f64>,
    feature: FmiFeature,
) -> Result<f64> {
    let (h, w) = check_same(a, b)?;
    check_same(a, fused)?;
    if h < WIN || w < WIN {
        return Err(Error::dimension(alloc::format!(
            "feature mutual information needs at least {WIN}x{WIN} pixels, got {h}x{w}"
        )));
    }
    Ok(0.5 * (source_score(a, fused, feature) + source_score(b, fused, feature)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tests::random_plane;

    const ALL: [FmiFeature; 3] = [FmiFeature::Pixel, FmiFeature::Dct, FmiFeature::Wavelet];

    #[test]
    fn fusing_a_source_with_itself_scores_exactly_one() {
        let a = random_plane(24, 24, 71);
        for feature in ALL {
            let v = fmi(&a, &a, &a, feature).unwrap();
            assert_eq!(v, 1.0, "{feature:?}");
        }
    }

    #[test]
    fn fused_equal_to_one_source_dominates_unrelated_noise() {
        let a = random_plane(32, 32, 72);
        let b = random_plane(32, 32, 73);
        for feature in ALL {
            let matched = fmi(&a, &b, &a, feature).unwrap();
            let avg = average_plane(&a, &b);
            let blended = fmi(&a, &b, &avg, feature).unwrap();
            // Source-identical fusion puts one NMI at its ceiling.
            assert!(matched >= 0.5, "{feature:?}: {matched}");
            assert!(blended.is_finite() && (0.0..=1.0).contains(&blended));
        }
    }

    #[test]
    fn swapping_the_sources_leaves_the_score_unchanged() {
        let a = random_plane(24, 32, 74);
        let b = random_plane(24, 32, 75);
        let f = average_plane(&a, &b);
        for feature in ALL {
            let ab = fmi(&a, &b, &f, feature).unwrap();
            let ba = fmi(&b, &a, &f, feature).unwrap();
            assert!((ab - ba).abs() < 1e-12, "{feature:?}");
        }
    }

    #[test]
    fn constant_windows_follow_the_degenerate_rules() {
        let flat = Tensor::filled(alloc::vec![8, 8], 0.5);
        let textured = random_plane(8, 8, 76);
        for feature in ALL {
            // Both sides flat: full credit.
            assert_eq!(fmi(&flat, &flat, &flat, feature).unwrap(), 1.0, "{feature:?}");
        }
        // A flat window is a degenerate pixel or wavelet feature, so fusing
        // textured sources into a constant earns nothing. Its DCT feature is
        // a lone DC spike, which still carries a (poorly matching)
        // distribution rather than being degenerate.
        for feature in [FmiFeature::Pixel, FmiFeature::Wavelet] {
            assert_eq!(fmi(&textured, &textured, &flat, feature).unwrap(), 0.0, "{feature:?}");
        }
        let dct = fmi(&textured, &textured, &flat, FmiFeature::Dct).unwrap();
        assert!((0.0..1.0).contains(&dct), "{dct}");
    }

    #[test]
    fn too_small_planes_are_rejected() {
        let a = random_plane(7, 12, 77);
        assert!(fmi(&a, &a, &a, FmiFeature::Pixel).is_err());
    }

    #[test]
    fn dct_of_a_known_window_matches_the_direct_sum() {
        let mut w = [0.0f64; 64];
        let mut r = crate::rng::seeded(78);
        for v in w.iter_mut() {
            *v = crate::rng::gen_unit_f64(&mut r);
        }
        let coeffs = dct8x8(&w);
        // DC coefficient of the orthonormal transform is sum / 8.
        let want_dc: f64 = w.iter().sum::<f64>() / 8.0;
        assert!((coeffs[0] - want_dc).abs() < 1e-12);
        // Parseval: energy is preserved.
        let e_in: f64 = w.iter().map(|v| v * v).sum();
        let e_out: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((e_in - e_out).abs() < 1e-9);
    }

    #[test]
    fn haar_details_vanish_on_constants_and_catch_edges() {
        let flat = [0.7f64; 64];
        assert!(haar_details(&flat).iter().all(|v| v.abs() < 1e-15));
        let mut step = [0.0f64; 64];
        for y in 0..8 {
            for x in 4..8 {
                step[y * 8 + x] = 1.0;
            }
        }
        // Vertical step at a block boundary: Haar pairs never straddle it,
        // so details vanish; shift the step by one column and they appear.
        let mut offset = [0.0f64; 64];
        for y in 0..8 {
            for x in 3..8 {
                offset[y * 8 + x] = 1.0;
            }
        }
        assert!(haar_details(&step).iter().all(|v| v.abs() < 1e-15));
        assert!(haar_details(&offset).iter().any(|v| v.abs() > 0.4));
    }

    fn average_plane(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        Tensor::from_vec(
            a.dims().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect(),
        )
    }
}
