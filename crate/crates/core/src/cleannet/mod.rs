//! Stage-1 de-raining network.
//!
//! A rainy RGB image is embedded by a 3x3 convolution, passed through a
//! chain of gated expert-mixture blocks and attention encoder blocks at a
//! single resolution, and reconstructed to a 3-channel residual that is
//! added back onto the input. Training drives the residual to cancel rain;
//! a zero-initialized reconstruction starts the whole network at identity.

mod attention;
mod experts;
mod ffn;

pub use attention::SparseChannelAttention;
pub use experts::{channel_descriptor, default_expert_kinds, Expert, ExpertKind, MoeBlock, EXPERT_ORDER};
pub use ffn::{DualScaleFeedForward, TransformerBlock};

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::rng::Rng;
use crate::Scalar;

/// Smallest height/width the block chain accepts.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CleanNetConfig {
    /// Feature width C carried through every block.
    pub base_channels: usize,
    /// Hidden width of the expert gate.
    pub attention_hidden: usize,
    /// Number of experts per mixture block (prefix of [`EXPERT_ORDER`]).
    pub num_experts: usize,
    /// Expert-mixture blocks before the encoder chain.
    pub num_moe_blocks: usize,
    /// Attention encoder blocks after the mixtures.
    pub num_transformer_blocks: usize,
    /// Fraction of key tokens every attention row keeps, in (0, 1].
    pub topk_fraction: f64,
    /// Attention heads; must divide `base_channels`.
    pub heads: usize,
}

impl Default for CleanNetConfig {
    fn default() -> Self {
        CleanNetConfig {
            base_channels: 48,
            attention_hidden: 32,
            num_experts: 8,
            num_moe_blocks: 2,
            num_transformer_blocks: 4,
            topk_fraction: 0.8,
            heads: 1,
        }
    }
}

impl CleanNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.attention_hidden == 0 || self.num_experts == 0 {
            return Err(Error::config(format!(
                "channel, gate, and expert counts must be >= 1: {self:?}"
            )));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::config(format!(
                "topk_fraction must be in (0, 1], got {}",
                self.topk_fraction
            )));
        }
        if self.num_experts > EXPERT_ORDER.len() {
            return Err(Error::config(format!(
                "at most {} experts are defined, got {}",
                EXPERT_ORDER.len(),
                self.num_experts
            )));
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide base_channels ({})",
                self.heads, self.base_channels
            )));
        }
        Ok(())
    }
}

/// The full de-raining network. Parameters live in the [`ParamSet`] passed
/// at construction; the struct itself only holds wiring and ids, so a frozen
/// network can run forward passes concurrently.
#[derive(Debug, Clone)]
pub struct CleanNet {
    pub config: CleanNetConfig,
    pub embed: Conv2d,
    pub moe_blocks: Vec<MoeBlock>,
    pub transformer_blocks: Vec<TransformerBlock>,
    pub recon: Conv2d,
}

impl CleanNet {
    pub fn new<T: Scalar>(
        config: &CleanNetConfig,
        ps: &mut ParamSet<T>,
        r: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let embed = Conv2d::new(ps, "clean.embed", 3, c, 3, 1, 1, true, r);
        let kinds = default_expert_kinds(config.num_experts)?;
        let mut moe_blocks = Vec::with_capacity(config.num_moe_blocks);
        for i in 0..config.num_moe_blocks {
            moe_blocks.push(MoeBlock::new(
                ps,
                &format!("clean.moe{i}"),
                c,
                config.attention_hidden,
                &kinds,
                r,
            )?);
        }
        let mut transformer_blocks = Vec::with_capacity(config.num_transformer_blocks);
        for i in 0..config.num_transformer_blocks {
            transformer_blocks.push(TransformerBlock::new(
                ps,
                &format!("clean.enc{i}"),
                c,
                config.heads,
                config.topk_fraction,
                r,
            )?);
        }
        let recon = Conv2d::new(ps, "clean.recon", c, 3, 3, 1, 1, true, r);
        Ok(CleanNet { config: config.clone(), embed, moe_blocks, transformer_blocks, recon })
    }

    /// Residual forward pass: input plus the predicted correction, without
    /// the final clamp so training sees gradients everywhere. `x` must be
    /// `[3, h, w]` with h, w >= [`MIN_SIDE`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let dims = tape.dims(x);
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::dimension(format!("expected an RGB [3, h, w] input, got {dims:?}")));
        }
        if dims[1] < MIN_SIDE || dims[2] < MIN_SIDE {
            return Err(Error::dimension(format!(
                "input {}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                dims[1], dims[2]
            )));
        }
        let mut f = self.embed.forward(tape, ps, x);
        for block in &self.moe_blocks {
            f = block.forward(tape, ps, f)?;
        }
        for block in &self.transformer_blocks {
            f = block.forward(tape, ps, f)?;
        }
        let correction = self.recon.forward(tape, ps, f);
        Ok(tape.add(correction, x))
    }

    /// Inference-facing forward: the residual sum clamped to [0, 1].
    pub fn forward_clamped<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.forward(tape, ps, x)?;
        Ok(tape.clamp01(y))
    }

    /// Zeroes the reconstruction head so the untrained network starts as the
    /// exact identity on its input.
    pub fn zero_init_reconstruction<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.recon.zero_init(ps);
    }
}
