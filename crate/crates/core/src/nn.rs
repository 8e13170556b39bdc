//! Parameter storage, layer primitives, and the Adam optimizer family.
//!
//! A [`ParamSet`] owns the master copy of every trainable tensor under a
//! unique name; layers hold [`ParamId`] handles and bind values onto a tape
//! per forward pass. Checkpointing serializes the named entries in insertion
//! order, so construction order is part of a model's wire format.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{ParamId, Tape, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::Scalar;

/// Named, ordered store of trainable tensors.
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Registers a tensor under a unique name and returns its handle.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.index()].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.index()].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Binds the current value of `id` onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id, self.get(id).clone())
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Kaiming-uniform initialization: bound `sqrt(6 / fan_in)`, suited to
/// ReLU-family networks.
pub fn kaiming_uniform<T: Scalar>(r: &mut Rng, dims: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = dims.iter().product();
    let data = (0..len)
        .map(|_| T::of_f64(rng::gen_range_f64(r, -bound, bound)))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Conventional conv-bias initialization: uniform in `±1/sqrt(fan_in)`.
pub fn bias_uniform<T: Scalar>(r: &mut Rng, len: usize, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..len)
        .map(|_| T::of_f64(rng::gen_range_f64(r, -bound, bound)))
        .collect();
    Tensor::from_vec(alloc::vec![len], data)
}

/// Learned 2-d convolution, stride 1, zero same-padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Same-padding convolution; odd kernels only.
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
        r: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "same-padding convolution requires an odd kernel");
        assert_eq!(in_channels % groups, 0);
        assert_eq!(out_channels % groups, 0);
        let icg = in_channels / groups;
        let fan_in = icg * kernel * kernel;
        let weight = ps.add(
            alloc::format!("{name}.weight"),
            kaiming_uniform(r, alloc::vec![out_channels, icg, kernel, kernel], fan_in),
        );
        let bias = bias.then(|| {
            ps.add(alloc::format!("{name}.bias"), bias_uniform(r, out_channels, fan_in))
        });
        Conv2d { weight, bias, in_channels, out_channels, kernel, dilation, groups }
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = ps.bind(tape, self.weight);
        let b = self.bias.map(|id| ps.bind(tape, id));
        tape.conv2d(x, w, b, self.groups, self.dilation, self.pad())
    }

    /// Writes zeros into the weight (and bias, if any). Used to start
    /// residual branches as exact identities.
    pub fn zero_init<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        ps.get_mut(self.weight).fill(T::zero());
        if let Some(b) = self.bias {
            ps.get_mut(b).fill(T::zero());
        }
    }
}

/// Layer normalization over the channel axis, independently at each spatial
/// position, with a learnable per-channel scale and no bias.
#[derive(Debug, Clone)]
pub struct LayerNormChannels {
    pub gamma: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNormChannels {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(
            alloc::format!("{name}.gamma"),
            Tensor::filled(alloc::vec![channels, 1, 1], T::one()),
        );
        LayerNormChannels { gamma, channels, eps: 1e-6 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let dims = tape.dims(x).to_vec();
        assert_eq!(dims[0], self.channels, "layer norm channel mismatch");
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let mu = tape.reduce_mean_channels(x);
        let mu_b = tape.broadcast_channels(mu, c);
        let centered = tape.sub(x, mu_b);
        let sq = tape.square(centered);
        let var = tape.reduce_mean_channels(sq);
        let var_eps = tape.add_scalar(var, T::of_f64(self.eps));
        let std = tape.sqrt(var_eps);
        let std_b = tape.broadcast_channels(std, c);
        let norm = tape.div(centered, std_b);
        let gamma = ps.bind(tape, self.gamma);
        let gamma_b = tape.broadcast_spatial(gamma, h, w);
        tape.mul(norm, gamma_b)
    }
}

/// Batch normalization computed from the statistics of the tensor being
/// normalized (no running averages): per-channel spatial mean and biased
/// variance, then a learnable per-channel affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(
            alloc::format!("{name}.gamma"),
            Tensor::filled(alloc::vec![channels, 1, 1], T::one()),
        );
        let beta = ps.add(
            alloc::format!("{name}.beta"),
            Tensor::zeros(alloc::vec![channels, 1, 1]),
        );
        BatchNorm2d { gamma, beta, channels, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let dims = tape.dims(x).to_vec();
        assert_eq!(dims[0], self.channels, "batch norm channel mismatch");
        let (_, h, w) = (dims[0], dims[1], dims[2]);
        let mu = tape.reduce_mean_spatial(x);
        let mu_b = tape.broadcast_spatial(mu, h, w);
        let centered = tape.sub(x, mu_b);
        let sq = tape.square(centered);
        let var = tape.reduce_mean_spatial(sq);
        let var_eps = tape.add_scalar(var, T::of_f64(self.eps));
        let std = tape.sqrt(var_eps);
        let std_b = tape.broadcast_spatial(std, h, w);
        let norm = tape.div(centered, std_b);
        let gamma = ps.bind(tape, self.gamma);
        let gamma_b = tape.broadcast_spatial(gamma, h, w);
        let scaled = tape.mul(norm, gamma_b);
        let beta = ps.bind(tape, self.beta);
        let beta_b = tape.broadcast_spatial(beta, h, w);
        tape.add(scaled, beta_b)
    }
}

/// Dense map on column vectors: `W x`, weight `[out, in]`, no bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        r: &mut Rng,
    ) -> Self {
        let weight = ps.add(
            alloc::format!("{name}.weight"),
            kaiming_uniform(r, alloc::vec![out_features, in_features], in_features),
        );
        Linear { weight, in_features, out_features }
    }

    /// `x` must be `[in, n]`; returns `[out, n]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = ps.bind(tape, self.weight);
        tape.matmul(w, x)
    }
}

/// Adam configuration. `decoupled_weight_decay` selects the AdamW update
/// (decay applied directly to the weights); otherwise decay is added to the
/// gradient in the classic L2 fashion.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
        }
    }
}

impl AdamConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, weight_decay, decoupled_weight_decay: true, ..AdamConfig::default() }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, weight_decay, ..AdamConfig::default() }
    }
}

/// Adam/AdamW with per-parameter first and second moment estimates.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, ps: &ParamSet<T>) -> Self {
        let m = ps.iter().map(|(_, _, t)| Tensor::zeros(t.dims().to_vec())).collect();
        let v = ps.iter().map(|(_, _, t)| Tensor::zeros(t.dims().to_vec())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment tensors and step counter, exposed for checkpointing.
    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restores optimizer state saved by [`Adam::state`].
    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(v.len(), self.v.len());
        for ((mi, vi), (m0, v0)) in m.iter().zip(&v).zip(self.m.iter().zip(&self.v)) {
            assert_eq!(mi.dims(), m0.dims(), "optimizer moment shape mismatch");
            assert_eq!(vi.dims(), v0.dims());
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// Applies one update using the gradients of a backward pass. Parameters
    /// without a gradient are untouched (their moments do not advance).
    pub fn step(&mut self, ps: &mut ParamSet<T>, grads: &crate::autodiff::Gradients<T>) {
        self.t += 1;
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let lr = T::of_f64(self.cfg.lr);
        let eps = T::of_f64(self.cfg.eps);
        let wd = T::of_f64(self.cfg.weight_decay);
        let bias1 = T::of_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bias2 = T::of_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (id, g) in grads.params() {
            let idx = id.index();
            assert!(idx < self.m.len(), "gradient for unknown parameter");
            let p = ps.get_mut(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.len() {
                let mut gi = g.data()[i];
                if !self.cfg.decoupled_weight_decay && self.cfg.weight_decay != 0.0 {
                    gi = gi + wd * p.data()[i];
                }
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                let mut update = m_hat / (v_hat.sqrt() + eps);
                if self.cfg.decoupled_weight_decay && self.cfg.weight_decay != 0.0 {
                    update = update + wd * p.data()[i];
                }
                p.data_mut()[i] = p.data()[i] - lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn param_names_are_unique_and_searchable() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.add("w", Tensor::zeros(vec![2]));
        assert_eq!(ps.find("w"), Some(a));
        assert_eq!(ps.find("missing"), None);
        assert_eq!(ps.name(a), "w");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_param_name_panics() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(vec![1]));
        ps.add("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance_per_position() {
        let mut ps = ParamSet::<f64>::new();
        let ln = LayerNormChannels::new(&mut ps, "ln", 8);
        let mut r = crate::rng::seeded(3);
        let mut x = Tensor::zeros(vec![8, 2, 2]);
        for v in x.data_mut() {
            *v = crate::rng::gen_unit_f64(&mut r) * 4.0 - 2.0;
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = ln.forward(&mut tape, &ps, xv);
        let y = tape.value(yv).clone();
        for pos in 0..4 {
            let (py, px) = (pos / 2, pos % 2);
            let vals: Vec<f64> = (0..8).map(|c| y.at3(c, py, px)).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "mean {mean} at {pos}");
            assert!((var - 1.0).abs() < 1e-4, "variance {var} at {pos}");
        }
    }

    #[test]
    fn batch_norm_normalizes_each_channel_spatially() {
        let mut ps = ParamSet::<f64>::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2);
        let mut x = Tensor::zeros(vec![2, 4, 4]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 - 3.0;
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = bn.forward(&mut tape, &ps, xv);
        let y = tape.value(yv).clone();
        for c in 0..2 {
            let plane = y.plane(c);
            let mean: f64 = plane.iter().sum::<f64>() / 16.0;
            let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::from_vec(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &ps);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = ps.bind(&mut tape, w);
            let sq = tape.square(wv);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            opt.step(&mut ps, &grads);
        }
        assert!(ps.get(w).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_weights_without_gradient_signal() {
        // gradient of mean over 1 element of 0*w is zero; only decay acts
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::from_vec(vec![1], vec![1.0]));
        let mut opt = Adam::new(
            AdamConfig { lr: 0.1, weight_decay: 0.5, decoupled_weight_decay: true, ..AdamConfig::default() },
            &ps,
        );
        let mut tape = Tape::new();
        let wv = ps.bind(&mut tape, w);
        let z = tape.mul_scalar(wv, 0.0);
        let loss = tape.mean_all(z);
        let grads = tape.backward(loss);
        opt.step(&mut ps, &grads);
        let got = ps.get(w).data()[0];
        assert!((got - 0.95).abs() < 1e-12, "expected pure decay step, got {got}");
    }

    #[test]
    fn optimizer_state_round_trip_preserves_trajectory() {
        let run = |resume: bool| {
            let mut ps = ParamSet::<f64>::new();
            let w = ps.add("w", Tensor::from_vec(vec![1], vec![2.0]));
            let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &ps);
            for step in 0..20 {
                if resume && step == 10 {
                    let (m, v, t) = opt.state();
                    let (m, v) = (m.to_vec(), v.to_vec());
                    let mut fresh = Adam::new(opt.config().clone(), &ps);
                    fresh.restore(m, v, t);
                    opt = fresh;
                }
                let mut tape = Tape::new();
                let wv = ps.bind(&mut tape, w);
                let sq = tape.square(wv);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss);
                opt.step(&mut ps, &grads);
            }
            ps.get(w).data()[0]
        };
        assert_eq!(run(false).to_bits(), run(true).to_bits());
    }
}
