//! Feature backbones and the information measurement they feed.
//!
//! The measurement scores how much structure a single-channel image carries:
//! features are taken at every backbone stage, each feature channel is run
//! through a discrete Laplacian, and the squared response is averaged over
//! positions, channels, and stages. Flat inputs score zero; texture scores
//! grow with contrast. The score never enters the gradient tape; it only
//! steers the blend weights.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use crate::autodiff::conv::{conv2d_forward, depthwise_fixed_forward, ConvSpec};
use crate::autodiff::PadMode;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// A frozen multi-stage feature extractor over single-channel inputs.
/// Implementations must be pure: the same input yields bit-identical stages.
pub trait FeatureExtractor {
    /// Feature maps ordered shallow to deep, each `[depth, h_k, w_k]`.
    fn stages(&self, plane: &Tensor<f32>) -> Result<Vec<Tensor<f32>>>;
    fn num_stages(&self) -> usize;
}

/// Single-stage extractor that returns the input unchanged. Keeps the
/// measurement pipeline testable without any pretrained weights and is the
/// desk-profile default.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn stages(&self, plane: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        check_plane(plane)?;
        Ok(alloc::vec![plane.clone()])
    }

    fn num_stages(&self) -> usize {
        1
    }
}

/// Layer widths of the 13-convolution backbone; stages are captured after
/// the ReLU of the last convolution in each group, before pooling.
const BACKBONE_PLAN: [(usize, usize); 13] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
];

/// Indexes into [`BACKBONE_PLAN`] whose output closes a stage.
const STAGE_ENDS: [usize; 5] = [1, 3, 6, 9, 12];

/// Channel statistics the backbone's training data was normalized with.
const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A frozen five-stage convolutional backbone (13 same-padded 3x3
/// convolutions with ReLU, 2x2 max pooling between stages). Single-channel
/// input is replicated to three channels and normalized with the backbone's
/// published input statistics.
pub struct ConvBackbone {
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl ConvBackbone {
    /// Builds the backbone from 13 (weight, bias) pairs, shallow first.
    /// Weight k must be `[out_k, in_k, 3, 3]` per [`BACKBONE_PLAN`].
    pub fn from_blobs(layers: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<Self> {
        if layers.len() != BACKBONE_PLAN.len() {
            return Err(Error::config(alloc::format!(
                "backbone needs {} convolution layers, got {}",
                BACKBONE_PLAN.len(),
                layers.len()
            )));
        }
        for (i, ((w, b), (ic, oc))) in layers.iter().zip(BACKBONE_PLAN).enumerate() {
            if w.dims() != [oc, ic, 3, 3] || b.dims() != [oc] {
                return Err(Error::config(alloc::format!(
                    "backbone layer {i} expects weight [{oc}, {ic}, 3, 3] and bias [{oc}], \
                     got {:?} and {:?}",
                    w.dims(),
                    b.dims()
                )));
            }
        }
        Ok(ConvBackbone { layers })
    }

    /// Deterministic randomly initialized backbone. A stand-in for runs
    /// where no pretrained weights are available; the measurement stays
    /// well-defined because random convolutions still respond to structure.
    pub fn random(seed: u64) -> Self {
        let mut r: Rng = rng::seeded(seed);
        let layers = BACKBONE_PLAN
            .iter()
            .map(|&(ic, oc)| {
                let fan_in = ic * 9;
                let scale = (2.0 / fan_in as f64).sqrt();
                let mut w = Tensor::<f32>::zeros(alloc::vec![oc, ic, 3, 3]);
                for v in w.data_mut() {
                    *v = (rng::gen_normal_f64(&mut r) * scale) as f32;
                }
                (w, Tensor::<f32>::zeros(alloc::vec![oc]))
            })
            .collect();
        ConvBackbone { layers }
    }

    fn adapt_input(plane: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = (plane.dims()[1], plane.dims()[2]);
        let mut x = Tensor::<f32>::zeros(alloc::vec![3, h, w]);
        for c in 0..3 {
            let (mean, std) = (INPUT_MEAN[c], INPUT_STD[c]);
            for (o, v) in x.plane_mut(c).iter_mut().zip(plane.data()) {
                *o = (*v - mean) / std;
            }
        }
        x
    }
}

impl FeatureExtractor for ConvBackbone {
    fn stages(&self, plane: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        check_plane(plane)?;
        let mut x = Self::adapt_input(plane);
        let spec = ConvSpec { groups: 1, dilation: 1, pad: 1 };
        let mut captured = Vec::with_capacity(STAGE_ENDS.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut y = conv2d_forward(&x, w, Some(b), &spec);
            for v in y.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let closes_stage = STAGE_ENDS.contains(&i);
            if closes_stage {
                captured.push(y.clone());
            }
            if closes_stage && i + 1 < self.layers.len() {
                if y.dims()[1] < 2 || y.dims()[2] < 2 {
                    return Err(Error::dimension(alloc::format!(
                        "input too small to pool below stage {}: {:?}",
                        captured.len(),
                        y.dims()
                    )));
                }
                y = max_pool2(&y);
            }
            x = y;
        }
        Ok(captured)
    }

    fn num_stages(&self) -> usize {
        STAGE_ENDS.len()
    }
}

fn check_plane(plane: &Tensor<f32>) -> Result<()> {
    if plane.dims().len() != 3 || plane.dims()[0] != 1 {
        return Err(Error::dimension(alloc::format!(
            "expected a single-channel [1, h, w] plane, got {:?}",
            plane.dims()
        )));
    }
    Ok(())
}

fn max_pool2(x: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::<f32>::zeros(alloc::vec![c, oh, ow]);
    for ch in 0..c {
        let plane = x.plane(ch);
        let opl = out.plane_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * 2) * w + ox * 2;
                let m = plane[base]
                    .max(plane[base + 1])
                    .max(plane[base + w])
                    .max(plane[base + w + 1]);
                opl[oy * ow + ox] = m;
            }
        }
    }
    out
}

/// Mean Laplacian energy of the extractor's features: per stage, the squared
/// 4-neighbor Laplacian response (replicate borders) summed over the map and
/// divided by `h * w * depth`, then averaged over stages. Non-negative and
/// zero exactly when every stage is flat.
pub fn information_measurement<E: FeatureExtractor + ?Sized>(
    plane: &Tensor<f32>,
    extractor: &E,
) -> Result<f64> {
    check_plane(plane)?;
    let stages = extractor.stages(plane)?;
    if stages.is_empty() {
        return Err(Error::config(alloc::string::String::from(
            "feature extractor produced no stages",
        )));
    }
    let kernel = Tensor::from_vec(
        alloc::vec![3, 3],
        alloc::vec![0.0f32, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    );
    let mut total = 0.0f64;
    for stage in &stages {
        let (d, h, w) = (stage.dims()[0], stage.dims()[1], stage.dims()[2]);
        let lap = depthwise_fixed_forward(stage, &kernel, PadMode::Replicate, 1);
        let mut energy = 0.0f64;
        for v in lap.data() {
            energy += (*v as f64) * (*v as f64);
        }
        total += energy / ((d * h * w) as f64);
    }
    Ok(total / stages.len() as f64)
}
