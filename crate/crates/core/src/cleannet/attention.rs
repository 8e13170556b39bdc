//! Self-attention over channel tokens with hard top-k selection.
//!
//! Each channel of a `[c, h, w]` map is one token of length `h*w`. Queries,
//! keys, and values come from 1x1 convolutions, so the score matrix is
//! `c x c` per head and the cost stays linear in spatial size. Every score
//! row keeps only its k strongest entries: discarded keys get exactly zero
//! weight and each kept row renormalizes to sum 1. With `topk_fraction = 1`
//! this is ordinary dense softmax attention.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct SparseChannelAttention {
    pub channels: usize,
    pub heads: usize,
    pub topk_fraction: f64,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub output: Conv2d,
}

impl SparseChannelAttention {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        heads: usize,
        topk_fraction: f64,
        r: &mut Rng,
    ) -> Result<Self> {
        if !(topk_fraction > 0.0 && topk_fraction <= 1.0) {
            return Err(Error::config(format!(
                "topk_fraction must be in (0, 1], got {topk_fraction}"
            )));
        }
        if heads == 0 || channels == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "channels ({channels}) must be a positive multiple of heads ({heads})"
            )));
        }
        let proj = |ps: &mut ParamSet<T>, suffix: &str, r: &mut Rng| {
            Conv2d::new(ps, &format!("{name}.{suffix}"), channels, channels, 1, 1, 1, true, r)
        };
        Ok(SparseChannelAttention {
            channels,
            heads,
            topk_fraction,
            query: proj(ps, "query", r),
            key: proj(ps, "key", r),
            value: proj(ps, "value", r),
            output: proj(ps, "output", r),
        })
    }

    /// Tokens each attention row may keep: `ceil(fraction * row_length)`.
    pub fn kept_per_row(&self) -> usize {
        let row = self.channels / self.heads;
        let k = (self.topk_fraction * row as f64).ceil() as usize;
        k.clamp(1, row)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, ps, x)?.0)
    }

    /// Forward pass that also returns a value snapshot of each head's
    /// attention matrix (rows = query channels, columns = key channels).
    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: Var,
    ) -> Result<(Var, Vec<Tensor<T>>)> {
        let dims = tape.dims(x);
        if dims.len() != 3 || dims[0] != self.channels {
            return Err(Error::config(format!(
                "attention built for {} channels got input dims {:?}",
                self.channels, dims
            )));
        }
        let (h, w) = (dims[1], dims[2]);
        let hw = h * w;

        let q = self.query.forward(tape, ps, x);
        let k = self.key.forward(tape, ps, x);
        let v = self.value.forward(tape, ps, x);
        let q = tape.reshape(q, alloc::vec![self.channels, hw]);
        let k = tape.reshape(k, alloc::vec![self.channels, hw]);
        let v = tape.reshape(v, alloc::vec![self.channels, hw]);

        let per_head = self.channels / self.heads;
        let keep = self.kept_per_row();
        let scale = T::of_f64(1.0 / (hw as f64).sqrt());

        let mut merged = Vec::with_capacity(self.heads);
        let mut attentions = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * per_head;
            let qh = tape.slice_dim0(q, start, per_head);
            let kh = tape.slice_dim0(k, start, per_head);
            let vh = tape.slice_dim0(v, start, per_head);
            let scores = tape.matmul_t(qh, false, kh, true);
            let scores = tape.mul_scalar(scores, scale);
            let attn = tape.topk_softmax_rows(scores, keep);
            attentions.push(tape.value(attn).clone());
            merged.push(tape.matmul(attn, vh));
        }
        let joined = if merged.len() == 1 { merged[0] } else { tape.concat_dim0(&merged) };
        let joined = tape.reshape(joined, alloc::vec![self.channels, h, w]);
        Ok((self.output.forward(tape, ps, joined), attentions))
    }

    /// Zeroing the output projection silences the attention branch.
    pub fn zero_init_output<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.output.zero_init(ps);
    }
}
