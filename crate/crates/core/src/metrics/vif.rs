//! Pixel-domain visual information fidelity.
//!
//! Four-scale pyramid: each scale uses a Gaussian window of side
//! `2^(5 - scale) + 1` (17, 9, 5, 3) with sigma `side / 5`. Scales after the
//! first low-pass filter the carried planes and keep every second pixel.
//! Local means, variances, and covariance over valid windows feed the
//! gain/visual-noise decomposition with additive noise variance 2 on the
//! 0..255 intensity range; the score is the ratio of summed distorted to
//! summed reference information. Scales the plane is too small for are
//! skipped; if nothing fits or the reference carries no information the
//! score is 1 by convention.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::losses::gaussian_window;
use crate::metrics::check_same;
use crate::tensor::Tensor;

const SIGMA_NSQ: f64 = 2.0;
const EPS: f64 = 1e-10;

fn filter_valid(t: &Tensor<f64>, win: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let k = win.dims()[0];
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros(alloc::vec![oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    s += win.at2(ky, kx) * t.at2(oy + ky, ox + kx);
                }
            }
            *out.at2_mut(oy, ox) = s;
        }
    }
    out
}

fn subsample2(t: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(alloc::vec![oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            *out.at2_mut(y, x) = t.at2(2 * y, 2 * x);
        }
    }
    out
}

/// Visual information fidelity of `dist` with respect to `ref_plane`, both
/// in 0..1 intensity.
pub fn vif(ref_plane: &Tensor<f64>, dist: &Tensor<f64>) -> Result<f64> {
    check_same(ref_plane, dist)?;
    let scale255 = |t: &Tensor<f64>| {
        Tensor::from_vec(t.dims().to_vec(), t.data().iter().map(|v| v * 255.0).collect())
    };
    let mut cur_r = scale255(ref_plane);
    let mut cur_d = scale255(dist);

    let mut num = 0.0;
    let mut den = 0.0;
    for scale in 1..=4usize {
        let n = (1usize << (5 - scale)) + 1;
        let win: Tensor<f64> = gaussian_window(n, n as f64 / 5.0);
        if scale > 1 {
            if cur_r.dims()[0] < n || cur_r.dims()[1] < n {
                break;
            }
            cur_r = subsample2(&filter_valid(&cur_r, &win));
            cur_d = subsample2(&filter_valid(&cur_d, &win));
        }
        let (h, w) = (cur_r.dims()[0], cur_r.dims()[1]);
        if h < n || w < n {
            continue;
        }
        let (oh, ow) = (h - n + 1, w - n + 1);
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..n {
                    for kx in 0..n {
                        let g = win.at2(ky, kx);
                        let x = cur_r.at2(oy + ky, ox + kx);
                        let y = cur_d.at2(oy + ky, ox + kx);
                        ma += g * x;
                        mb += g * y;
                        saa += g * x * x;
                        sbb += g * y * y;
                        sab += g * x * y;
                    }
                }
                let mut s1 = (saa - ma * ma).max(0.0);
                let s2 = (sbb - mb * mb).max(0.0);
                let s12 = sab - ma * mb;
                let mut g = s12 / (s1 + EPS);
                let mut sv = s2 - g * s12;
                if s1 < EPS {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < EPS {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                if sv <= EPS {
                    sv = EPS;
                }
                num += (1.0 + g * g * s1 / (sv + SIGMA_NSQ)).log10();
                den += (1.0 + s1 / SIGMA_NSQ).log10();
            }
        }
    }
    if den == 0.0 {
        Ok(1.0)
    } else {
        Ok(num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ssim::tests::{perturb, smooth_plane};
    use crate::metrics::tests::random_plane;

    #[test]
    fn identity_scores_one() {
        let a = random_plane(64, 64, 51);
        let v = vif(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "self VIF {v}");
    }

    #[test]
    fn constant_planes_fall_back_to_one() {
        let a = Tensor::filled(alloc::vec![64, 64], 0.25);
        let b = Tensor::filled(alloc::vec![64, 64], 0.75);
        assert_eq!(vif(&a, &b).unwrap(), 1.0);
        let tiny = Tensor::filled(alloc::vec![8, 8], 0.5);
        assert_eq!(vif(&tiny, &tiny).unwrap(), 1.0);
    }

    #[test]
    fn degradation_lowers_the_score_monotonically() {
        let base = smooth_plane(64, 64);
        let mut prev = vif(&base, &base).unwrap();
        for (i, sigma) in [0.02, 0.08, 0.2].iter().enumerate() {
            let noisy = perturb(&base, *sigma, 60 + i as u64);
            let v = vif(&base, &noisy).unwrap();
            assert!(v < prev, "not decreasing at sigma {sigma}: {v} vs {prev}");
            assert!(v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn gain_enhancement_can_exceed_one_but_stays_finite() {
        // Contrast-boosted copy carries more local variance than the source.
        let base = smooth_plane(48, 48);
        let boosted = Tensor::from_vec(
            alloc::vec![48, 48],
            base.data().iter().map(|v| ((v - 0.5) * 1.6 + 0.5).clamp(0.0, 1.0)).collect(),
        );
        let v = vif(&base, &boosted).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let a = random_plane(48, 40, 52);
        let b = random_plane(48, 40, 53);
        assert_eq!(vif(&a, &b).unwrap(), vif(&a, &b).unwrap());
    }
}
