//! Convolution expert bank gated by learned channel attention.
//!
//! A block routes its input through several fixed-architecture experts in
//! parallel, scales every expert's output by a scalar weight computed from
//! the input's channel descriptor, concatenates the scaled outputs along the
//! channel axis, and projects back to the input width with a 1x1 convolution.
//! The projection result is added to the block input, so a zero-initialized
//! projection makes the block an exact identity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

/// Architecture of one expert. Every kind maps `[c, h, w]` to `[c, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    /// 3x3 uniform average pooling, stride 1, zero padding.
    AvgPool3,
    /// Depthwise k x k convolution followed by a pointwise 1x1 projection.
    Separable(usize),
    /// Dense 3x3 convolution dilated so its taps span the named extent.
    Dilated(usize),
    /// Passthrough. Exists to build minimal fixtures in tests.
    Identity,
}

/// The canonical bank order; a configured expert count takes a prefix.
pub const EXPERT_ORDER: [ExpertKind; 8] = [
    ExpertKind::AvgPool3,
    ExpertKind::Separable(1),
    ExpertKind::Separable(3),
    ExpertKind::Separable(5),
    ExpertKind::Separable(7),
    ExpertKind::Dilated(3),
    ExpertKind::Dilated(5),
    ExpertKind::Dilated(7),
];

/// First `count` kinds of [`EXPERT_ORDER`].
pub fn default_expert_kinds(count: usize) -> Result<Vec<ExpertKind>> {
    if count == 0 || count > EXPERT_ORDER.len() {
        return Err(Error::config(format!(
            "expert count must be in 1..={}, got {count}",
            EXPERT_ORDER.len()
        )));
    }
    Ok(EXPERT_ORDER[..count].to_vec())
}

#[derive(Debug, Clone)]
enum ExpertLayer {
    Pool,
    Identity,
    Separable { depthwise: Conv2d, pointwise: Conv2d },
    Dense { conv: Conv2d },
}

/// One expert operator over `[c, h, w]` feature maps.
#[derive(Debug, Clone)]
pub struct Expert {
    pub kind: ExpertKind,
    layer: ExpertLayer,
}

impl Expert {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        kind: ExpertKind,
        r: &mut Rng,
    ) -> Result<Self> {
        let layer = match kind {
            ExpertKind::AvgPool3 => ExpertLayer::Pool,
            ExpertKind::Identity => ExpertLayer::Identity,
            ExpertKind::Separable(k) => {
                if k % 2 == 0 {
                    return Err(Error::config(format!("separable expert kernel must be odd, got {k}")));
                }
                ExpertLayer::Separable {
                    depthwise: Conv2d::new(
                        ps,
                        &format!("{name}.depthwise"),
                        channels,
                        channels,
                        k,
                        1,
                        channels,
                        true,
                        r,
                    ),
                    pointwise: Conv2d::new(
                        ps,
                        &format!("{name}.pointwise"),
                        channels,
                        channels,
                        1,
                        1,
                        1,
                        true,
                        r,
                    ),
                }
            }
            ExpertKind::Dilated(extent) => {
                if extent < 3 || extent % 2 == 0 {
                    return Err(Error::config(format!(
                        "dilated expert extent must be odd and >= 3, got {extent}"
                    )));
                }
                // A 3x3 kernel with dilation d has taps spanning 2d+1 samples.
                let dilation = (extent - 1) / 2;
                ExpertLayer::Dense {
                    conv: Conv2d::new(
                        ps,
                        &format!("{name}.conv"),
                        channels,
                        channels,
                        3,
                        dilation,
                        1,
                        true,
                        r,
                    ),
                }
            }
        };
        Ok(Expert { kind, layer })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Var {
        match &self.layer {
            ExpertLayer::Pool => {
                let ninth = T::of_f64(1.0 / 9.0);
                let kernel = Tensor::filled(alloc::vec![3, 3], ninth);
                tape.depthwise_fixed(x, kernel, PadMode::Zero, 1)
            }
            ExpertLayer::Identity => x,
            ExpertLayer::Separable { depthwise, pointwise } => {
                let mid = depthwise.forward(tape, ps, x);
                pointwise.forward(tape, ps, mid)
            }
            ExpertLayer::Dense { conv } => conv.forward(tape, ps, x),
        }
    }
}

/// Expert-mixture block: gated parallel experts with a residual fuse.
#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub channels: usize,
    pub gate_hidden: usize,
    /// Channel descriptor -> hidden gate activation, `[hidden, channels]`.
    pub gate_in: Linear,
    /// Hidden activation -> one scalar weight per expert, `[experts, hidden]`.
    pub gate_out: Linear,
    pub experts: Vec<Expert>,
    /// 1x1 fuse projection from concatenated expert outputs back to `channels`.
    pub fuse: Conv2d,
}

impl MoeBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        gate_hidden: usize,
        kinds: &[ExpertKind],
        r: &mut Rng,
    ) -> Result<Self> {
        if channels == 0 || gate_hidden == 0 || kinds.is_empty() {
            return Err(Error::config(String::from(
                "expert block needs channels >= 1, gate hidden >= 1, and at least one expert",
            )));
        }
        let gate_in = Linear::new(ps, &format!("{name}.gate_in"), channels, gate_hidden, r);
        let gate_out = Linear::new(ps, &format!("{name}.gate_out"), gate_hidden, kinds.len(), r);
        let mut experts = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.iter().enumerate() {
            experts.push(Expert::new(ps, &format!("{name}.expert{i}"), channels, *kind, r)?);
        }
        let fuse = Conv2d::new(
            ps,
            &format!("{name}.fuse"),
            channels * kinds.len(),
            channels,
            1,
            1,
            1,
            true,
            r,
        );
        Ok(MoeBlock { channels, gate_hidden, gate_in, gate_out, experts, fuse })
    }

    /// Gated mixture forward. Returns a map with the input's shape.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let dims = tape.dims(x);
        if dims.len() != 3 || dims[0] != self.channels {
            return Err(Error::config(format!(
                "expert block built for {} channels got input dims {:?}",
                self.channels, dims
            )));
        }
        let pooled = tape.reduce_mean_spatial(x);
        let descriptor = tape.reshape(pooled, alloc::vec![self.channels, 1]);
        let hidden = self.gate_in.forward(tape, ps, descriptor);
        let hidden = tape.relu(hidden);
        let gate = self.gate_out.forward(tape, ps, hidden);

        let mut weighted = Vec::with_capacity(self.experts.len());
        for (i, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(tape, ps, x);
            let wi = tape.slice_dim0(gate, i, 1);
            weighted.push(tape.mul_broadcast(out, wi));
        }
        let stacked = tape.concat_dim0(&weighted);
        let fused = self.fuse.forward(tape, ps, stacked);
        Ok(tape.add(fused, x))
    }

    /// Zeroing the fuse projection turns the block into an exact identity.
    pub fn zero_init_output<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.fuse.zero_init(ps);
    }
}

/// Spatial mean of every channel: `descriptor[j] = mean over h, w of F[j]`.
/// Panics on an empty map.
pub fn channel_descriptor<T: Scalar>(f: &Tensor<T>) -> Vec<T> {
    assert_eq!(f.dims().len(), 3, "channel descriptor expects [c, h, w]");
    assert!(!f.is_empty(), "channel descriptor of an empty map");
    let (h, w) = f.hw();
    let inv = T::of_usize(h * w).recip();
    (0..f.channels())
        .map(|c| {
            let mut acc = T::zero();
            for v in f.plane(c) {
                acc = acc + *v;
            }
            acc * inv
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::zeros(alloc::vec![c, h, w]);
        for v in t.data_mut() {
            *v = rng::gen_unit_f64(&mut r);
        }
        t
    }

    #[test]
    fn descriptor_of_constant_map_is_the_constant() {
        let f: Tensor<f64> = Tensor::filled(alloc::vec![5, 3, 4], 0.625);
        for v in channel_descriptor(&f) {
            assert_eq!(v, 0.625);
        }
    }

    #[test]
    fn descriptor_of_single_pixel_is_the_pixel() {
        let f = Tensor::from_vec(alloc::vec![3, 1, 1], alloc::vec![0.1f64, 0.7, 0.3]);
        assert_eq!(channel_descriptor(&f), alloc::vec![0.1, 0.7, 0.3]);
    }

    #[test]
    fn descriptor_matches_double_loop_mean() {
        let f = random_map(3, 4, 4, 9);
        let got = channel_descriptor(&f);
        for c in 0..3 {
            let mut acc = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    acc += f.at3(c, y, x);
                }
            }
            let want = acc / 16.0;
            assert!((got[c] - want).abs() < 1e-12, "channel {c}: {} vs {want}", got[c]);
        }
    }

    #[test]
    fn zeroed_fuse_makes_the_block_an_exact_identity() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(4);
        let kinds = default_expert_kinds(8).unwrap();
        let block = MoeBlock::new(&mut ps, "blk", 6, 4, &kinds, &mut r).unwrap();
        block.zero_init_output(&mut ps);

        let x = random_map(6, 9, 7, 11);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &ps, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn block_preserves_the_default_width_shape() {
        let mut ps = ParamSet::<f32>::new();
        let mut r = rng::seeded(5);
        let kinds = default_expert_kinds(8).unwrap();
        let block = MoeBlock::new(&mut ps, "blk", 48, 32, &kinds, &mut r).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(random_map(48, 64, 64, 2).cast::<f32>());
        let y = block.forward(&mut tape, &ps, xv).unwrap();
        assert_eq!(tape.dims(y), &[48, 64, 64]);
    }

    #[test]
    fn channel_mismatch_is_a_configuration_error() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(6);
        let block = MoeBlock::new(&mut ps, "blk", 6, 4, &[ExpertKind::Identity], &mut r).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(random_map(5, 8, 8, 3));
        assert!(matches!(block.forward(&mut tape, &ps, xv), Err(Error::Config(_))));
    }

    #[test]
    fn single_identity_expert_with_unit_gate_matches_direct_composition() {
        // Constant channel planes make the descriptor exact, and hand-set gate
        // weights drive the single expert's scale to exactly 1.
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(7);
        let block = MoeBlock::new(&mut ps, "blk", 2, 1, &[ExpertKind::Identity], &mut r).unwrap();
        ps.get_mut(block.gate_in.weight).data_mut().copy_from_slice(&[2.0, 0.0]);
        ps.get_mut(block.gate_out.weight).data_mut().copy_from_slice(&[1.0]);

        let mut x = Tensor::zeros(alloc::vec![2usize, 3, 3]);
        x.plane_mut(0).fill(0.5); // descriptor (0.5, 0.25) -> gate relu(2*0.5) = 1
        x.plane_mut(1).fill(0.25);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &ps, xv).unwrap();
        let got = tape.value(y);

        let fw = ps.get(block.fuse.weight);
        let fb = ps.get(block.fuse.bias.unwrap());
        for c in 0..2 {
            for p in 0..9 {
                let want = fw.data()[c * 2] * x.data()[p]
                    + fw.data()[c * 2 + 1] * x.data()[9 + p]
                    + fb.data()[c]
                    + x.data()[c * 9 + p];
                let gotv = got.data()[c * 9 + p];
                assert!((gotv - want).abs() < 1e-12, "c{c} p{p}: {gotv} vs {want}");
            }
        }
    }

    #[test]
    fn every_expert_kind_preserves_shape() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(8);
        for (i, kind) in EXPERT_ORDER.iter().enumerate() {
            let e = Expert::new(&mut ps, &format!("e{i}"), 3, *kind, &mut r).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(random_map(3, 10, 11, i as u64));
            let y = e.forward(&mut tape, &ps, xv);
            assert_eq!(tape.dims(y), &[3, 10, 11], "{kind:?}");
        }
    }

    #[test]
    fn oversized_expert_count_is_rejected() {
        assert!(default_expert_kinds(9).is_err());
        assert!(default_expert_kinds(0).is_err());
        assert_eq!(default_expert_kinds(8).unwrap().len(), 8);
    }
}
