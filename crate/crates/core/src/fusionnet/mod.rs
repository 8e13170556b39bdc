//! Stage-2 visible/infrared fusion.
//!
//! The fusion operator concatenates a cleaned luminance channel with the
//! infrared channel and maps them through a small convolutional network to a
//! single fused luminance plane. The blend is supervised by adaptive weights
//! derived from each source's measured information content (see
//! [`extractor::information_measurement`]), and the fused plane is then
//! polished by cascaded contrast refinement (see [`refine`]).

#[allow(unused_imports)]
use num_traits::Float;

pub mod extractor;
pub mod refine;

pub use extractor::{
    information_measurement, ConvBackbone, FeatureExtractor, IdentityExtractor,
};
pub use refine::{cascaded_refine, refine_step, RefineOutcome, RefineStats, RefinementNets};

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::rng::Rng;
use crate::Scalar;

/// Normalized blend weights for the two sources of a fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub visible: f64,
    pub infrared: f64,
}

impl FusionWeights {
    /// Equal blend, the fixed point of [`adaptive_weights`] on equal inputs.
    pub fn balanced() -> Self {
        FusionWeights { visible: 0.5, infrared: 0.5 }
    }
}

/// Softmax of the two information measurements, so the weights land in
/// [0, 1] and sum to exactly 1.
pub fn adaptive_weights(visible_info: f64, infrared_info: f64) -> Result<FusionWeights> {
    if !visible_info.is_finite() || !infrared_info.is_finite() {
        return Err(Error::numeric(format!(
            "information measurements must be finite, got ({visible_info}, {infrared_info})"
        )));
    }
    let m = visible_info.max(infrared_info);
    let ev = (visible_info - m).exp();
    let ei = (infrared_info - m).exp();
    let z = ev + ei;
    Ok(FusionWeights { visible: ev / z, infrared: ei / z })
}

/// Knobs of the fusion/refinement stage.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionConfig {
    /// Cascaded fusion/refinement stages K.
    pub cascaded_stages: usize,
    /// Refinement iterations T inside each stage.
    pub adjust_iterations: usize,
    /// Intensity-term weight in the fusion objective.
    pub alpha: f64,
    /// Consistency-term weight in the refinement objective.
    pub beta: f64,
    /// Guard added to the contrast-balance denominator.
    pub eps_div: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            cascaded_stages: 3,
            adjust_iterations: 3,
            alpha: 20.0,
            beta: 1.5,
            eps_div: 1e-4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cascaded_stages == 0 || self.adjust_iterations == 0 {
            return Err(Error::config(format!(
                "stage and iteration counts must be >= 1: K={}, T={}",
                self.cascaded_stages, self.adjust_iterations
            )));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.eps_div > 0.0) {
            return Err(Error::config(format!(
                "alpha, beta, and eps_div must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The fusion operator: visible and infrared luminance in, fused luminance
/// out. Four 3x3 convolutions (2 -> 16 -> 32 -> 16 -> 1); hidden layers use
/// ReLU and the head uses Sigmoid, so outputs always land in (0, 1).
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub conv0: Conv2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Conv2d,
}

impl FusionNet {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, r: &mut Rng) -> Self {
        FusionNet {
            conv0: Conv2d::new(ps, "fusion.conv0", 2, 16, 3, 1, 1, true, r),
            conv1: Conv2d::new(ps, "fusion.conv1", 16, 32, 3, 1, 1, true, r),
            conv2: Conv2d::new(ps, "fusion.conv2", 32, 16, 3, 1, 1, true, r),
            head: Conv2d::new(ps, "fusion.head", 16, 1, 3, 1, 1, true, r),
        }
    }

    /// Fuses two aligned single-channel planes. The visible channel is
    /// stacked first, infrared second.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        y_visible: Var,
        infrared: Var,
    ) -> Result<Var> {
        let dv = tape.dims(y_visible);
        let di = tape.dims(infrared);
        if dv != di || dv.len() != 3 || dv[0] != 1 {
            return Err(Error::dimension(format!(
                "fusion inputs must be matching [1, h, w] planes, got {dv:?} and {di:?}"
            )));
        }
        let x = tape.concat_dim0(&[y_visible, infrared]);
        let x = self.conv0.forward(tape, ps, x);
        let x = tape.relu(x);
        let x = self.conv1.forward(tape, ps, x);
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, ps, x);
        let x = tape.relu(x);
        let x = self.head.forward(tape, ps, x);
        Ok(tape.sigmoid(x))
    }
}
