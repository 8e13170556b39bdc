//! Gradient-based fusion quality.
//!
//! Sobel gradients (replicate border) give each pixel an edge strength and
//! orientation. For every source-fused pixel pair, strength preservation
//! (ratio of the weaker to the stronger edge) and orientation preservation
//! (one minus the angle gap as a fraction of a quarter turn) pass through
//! calibrated sigmoids and multiply into a per-pixel score, normalized so a
//! perfectly preserved edge scores 1. The image score averages the two
//! per-source scores weighted by source edge strength; if neither source
//! has any edges the score is 0.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::metrics::check_same;
use crate::tensor::Tensor;

const GAMMA_G: f64 = 0.9994;
const KAPPA_G: f64 = 15.0;
const SIGMA_G: f64 = 0.5;
const GAMMA_A: f64 = 0.9879;
const KAPPA_A: f64 = 22.0;
const SIGMA_A: f64 = 0.8;

/// Edge strength and orientation from 3x3 Sobel with replicate border.
fn sobel(t: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        t.at2(yy, xx)
    };
    let mut strength = Tensor::zeros(alloc::vec![h, w]);
    let mut angle = Tensor::zeros(alloc::vec![h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            // Paired differences cancel exactly on constant regions, so flat
            // planes report zero strength rather than rounding residue.
            let gx = (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 2.0 * (at(y, x + 1) - at(y, x - 1))
                + (at(y + 1, x + 1) - at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 2.0 * (at(y + 1, x) - at(y - 1, x))
                + (at(y + 1, x + 1) - at(y - 1, x + 1));
            *strength.at2_mut(y as usize, x as usize) = (gx * gx + gy * gy).sqrt();
            *angle.at2_mut(y as usize, x as usize) = if gx == 0.0 {
                core::f64::consts::FRAC_PI_2
            } else {
                (gy / gx).atan()
            };
        }
    }
    (strength, angle)
}

fn sigmoid(gamma: f64, kappa: f64, shift: f64, v: f64) -> f64 {
    gamma / (1.0 + (-kappa * (v - shift)).exp())
}

/// Per-pixel preservation of one source edge in the fused image, already
/// normalized by the perfect-preservation score.
fn preservation(gs: f64, asrc: f64, gf: f64, af: f64, q0: f64) -> f64 {
    let strength_ratio = if gs == 0.0 && gf == 0.0 {
        0.0
    } else {
        gs.min(gf) / gs.max(gf)
    };
    let angle_agreement = 1.0 - (asrc - af).abs() / core::f64::consts::FRAC_PI_2;
    let q = sigmoid(GAMMA_G, KAPPA_G, SIGMA_G, strength_ratio)
        * sigmoid(GAMMA_A, KAPPA_A, SIGMA_A, angle_agreement);
    q / q0
}

/// Edge-preservation quality of `fused` against sources `a` and `b`,
/// in 0..=1.
pub fn qabf(a: &Tensor<f64>, b: &Tensor<f64>, fused: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_same(a, b)?;
    check_same(a, fused)?;
    let (ga, aa) = sobel(a);
    let (gb, ab) = sobel(b);
    let (gf, af) = sobel(fused);
    let q0 = sigmoid(GAMMA_G, KAPPA_G, SIGMA_G, 1.0) * sigmoid(GAMMA_A, KAPPA_A, SIGMA_A, 1.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (wa, wb) = (ga.at2(y, x), gb.at2(y, x));
            let qa = preservation(wa, aa.at2(y, x), gf.at2(y, x), af.at2(y, x), q0);
            let qb = preservation(wb, ab.at2(y, x), gf.at2(y, x), af.at2(y, x), q0);
            num += wa * qa + wb * qb;
            den += wa + wb;
        }
    }
    if den == 0.0 {
        Ok(0.0)
    } else {
        Ok((num / den).clamp(0.0, 1.0))
    }
}
