//! Dual-kernel feed-forward stage and the encoder block that pairs it with
//! sparse channel attention.
//!
//! The feed-forward runs two depthwise branches (3x3 and 5x5) in parallel,
//! concatenates them along channels, and projects back to the input width
//! with a 1x1 convolution. The encoder block wraps attention and feed-forward
//! in pre-normalized residual branches, so zeroing both branch output
//! projections makes the block an exact identity.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNormChannels, ParamSet};
use crate::rng::Rng;
use crate::Scalar;

use super::attention::SparseChannelAttention;

#[derive(Debug, Clone)]
pub struct DualScaleFeedForward {
    pub channels: usize,
    pub branch3: Conv2d,
    pub branch5: Conv2d,
    pub project: Conv2d,
}

impl DualScaleFeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        r: &mut Rng,
    ) -> Self {
        let branch3 =
            Conv2d::new(ps, &format!("{name}.branch3"), channels, channels, 3, 1, channels, true, r);
        let branch5 =
            Conv2d::new(ps, &format!("{name}.branch5"), channels, channels, 5, 1, channels, true, r);
        let project =
            Conv2d::new(ps, &format!("{name}.project"), channels * 2, channels, 1, 1, 1, true, r);
        DualScaleFeedForward { channels, branch3, branch5, project }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let dims = tape.dims(x);
        if dims.len() != 3 || dims[0] != self.channels {
            return Err(Error::config(format!(
                "feed-forward built for {} channels got input dims {:?}",
                self.channels, dims
            )));
        }
        let b3 = self.branch3.forward(tape, ps, x);
        let b5 = self.branch5.forward(tape, ps, x);
        let joined = tape.concat_dim0(&[b3, b5]);
        Ok(self.project.forward(tape, ps, joined))
    }

    pub fn zero_init_output<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.project.zero_init(ps);
    }
}

/// Pre-normalized residual encoder block:
/// `mid = x + attention(norm1(x))`, `out = mid + feed_forward(norm2(mid))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNormChannels,
    pub attention: SparseChannelAttention,
    pub norm2: LayerNormChannels,
    pub feed_forward: DualScaleFeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        heads: usize,
        topk_fraction: f64,
        r: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNormChannels::new(ps, &format!("{name}.norm1"), channels),
            attention: SparseChannelAttention::new(
                ps,
                &format!("{name}.attention"),
                channels,
                heads,
                topk_fraction,
                r,
            )?,
            norm2: LayerNormChannels::new(ps, &format!("{name}.norm2"), channels),
            feed_forward: DualScaleFeedForward::new(ps, &format!("{name}.ffn"), channels, r),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(tape, ps, x);
        let attended = self.attention.forward(tape, ps, n1)?;
        let mid = tape.add(x, attended);
        let n2 = self.norm2.forward(tape, ps, mid);
        let lifted = self.feed_forward.forward(tape, ps, n2)?;
        Ok(tape.add(mid, lifted))
    }

    pub fn zero_init_outputs<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.attention.zero_init_output(ps);
        self.feed_forward.zero_init_output(ps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::conv::{conv2d_forward, ConvSpec};
    use crate::rng;
    use crate::tensor::Tensor;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::zeros(alloc::vec![c, h, w]);
        for v in t.data_mut() {
            *v = rng::gen_unit_f64(&mut r);
        }
        t
    }

    #[test]
    fn feed_forward_preserves_shape_at_default_width() {
        let mut ps = ParamSet::<f32>::new();
        let mut r = rng::seeded(3);
        let ffn = DualScaleFeedForward::new(&mut ps, "ffn", 48, &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(random_map(48, 32, 32, 1).cast::<f32>());
        let y = ffn.forward(&mut tape, &ps, xv).unwrap();
        assert_eq!(tape.dims(y), &[48, 32, 32]);
    }

    #[test]
    fn zero_input_yields_constant_bias_planes() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(4);
        let ffn = DualScaleFeedForward::new(&mut ps, "ffn", 5, &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::zeros(alloc::vec![5usize, 6, 7]));
        let y = ffn.forward(&mut tape, &ps, xv).unwrap();
        let out = tape.value(y);
        for c in 0..5 {
            let plane = out.plane(c);
            let interior = plane[3 * 7 + 3];
            // Interior positions see the full bias stencil; every channel's
            // interior must be one constant.
            for yy in 2..4 {
                for xx in 2..5 {
                    assert!((plane[yy * 7 + xx] - interior).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeroed_wide_branch_reduces_to_the_narrow_pathway() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(5);
        let ffn = DualScaleFeedForward::new(&mut ps, "ffn", 4, &mut r);
        ffn.branch5.zero_init(&mut ps);

        let x = random_map(4, 8, 9, 6);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = ffn.forward(&mut tape, &ps, xv).unwrap();

        // Compose the surviving pathway directly: depthwise 3x3, zero planes
        // for the silenced branch, then the 1x1 projection.
        let spec3 = ConvSpec { groups: 4, dilation: 1, pad: 1 };
        let b3 = conv2d_forward(
            &x,
            ps.get(ffn.branch3.weight),
            Some(ps.get(ffn.branch3.bias.unwrap())),
            &spec3,
        );
        let mut stacked = Tensor::<f64>::zeros(alloc::vec![8usize, 8, 9]);
        stacked.data_mut()[..4 * 72].copy_from_slice(b3.data());
        let want = conv2d_forward(
            &stacked,
            ps.get(ffn.project.weight),
            Some(ps.get(ffn.project.bias.unwrap())),
            &ConvSpec { groups: 1, dilation: 1, pad: 0 },
        );
        for (g, w) in tape.value(y).data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_projections_make_the_block_an_exact_identity() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(7);
        let block = TransformerBlock::new(&mut ps, "blk", 6, 1, 0.8, &mut r).unwrap();
        block.zero_init_outputs(&mut ps);

        let x = random_map(6, 9, 8, 8);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &ps, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn block_equals_manually_chained_stages() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(9);
        let block = TransformerBlock::new(&mut ps, "blk", 6, 2, 0.7, &mut r).unwrap();
        let x = random_map(6, 5, 7, 10);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &ps, xv).unwrap();

        let mut manual = Tape::new();
        let xm = manual.leaf(x);
        let n1 = block.norm1.forward(&mut manual, &ps, xm);
        let att = block.attention.forward(&mut manual, &ps, n1).unwrap();
        let mid = manual.add(xm, att);
        let n2 = block.norm2.forward(&mut manual, &ps, mid);
        let ff = block.feed_forward.forward(&mut manual, &ps, n2).unwrap();
        let want = manual.add(mid, ff);
        assert_eq!(tape.value(y).data(), manual.value(want).data());
    }
}
