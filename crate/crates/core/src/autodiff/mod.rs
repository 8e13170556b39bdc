//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations eagerly as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node and
//! for every bound parameter. Handles ([`Var`]) are indices into the tape, so
//! they are `Copy` and only valid for the tape that produced them.
//!
//! Parameters enter a graph through [`Tape::param`], which ties the node to a
//! caller-assigned [`ParamId`]. Binding the same id several times (shared
//! weights, batched evaluation) accumulates the gradients of all bindings.
//!
//! Shape errors are programming errors, not runtime conditions, so the ops
//! panic with a descriptive message instead of returning `Result`.

pub(crate) mod conv;

pub use conv::{ConvSpec, PadMode};

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::Scalar;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Identity of a trainable parameter, assigned by the parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Clamp01(Var),
    /// Tensor times a one-element tensor.
    MulBroadcast(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    /// Row-wise softmax over the `k` largest entries; the rest are excluded
    /// from the distribution and receive exactly zero weight.
    TopkSoftmaxRows {
        x: Var,
        kept: Vec<bool>,
    },
    ConcatDim0(Vec<Var>),
    SliceDim0 {
        x: Var,
        start: usize,
    },
    /// `[c, h, w]` to per-channel means `[c, 1, 1]`.
    ReduceMeanSpatial(Var),
    /// `[c, 1, 1]` replicated to `[c, h, w]`.
    BroadcastSpatial(Var),
    /// `[c, h, w]` to per-position means `[1, h, w]`.
    ReduceMeanChannels(Var),
    /// `[1, h, w]` replicated to `[c, h, w]`.
    BroadcastChannels(Var),
    MeanAll(Var),
    /// Non-overlapping `k`-by-`k` block means; trailing rows and columns that
    /// do not fill a block are dropped and receive zero gradient.
    AvgPoolBlock {
        x: Var,
        k: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    /// Depthwise filtering with a constant (non-learned) kernel.
    DepthwiseFixed {
        x: Var,
        kernel: Tensor<T>,
        pad: PadMode,
        stride: usize,
    },
    /// Mean squared forward difference (horizontal plus vertical), a scalar.
    SmoothnessTv(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradient results of one backward pass.
pub struct Gradients<T: Scalar> {
    node_grads: Vec<Option<Tensor<T>>>,
    param_grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to a node, if any path
    /// reached it.
    pub fn node(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient for a bound parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_grads.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.param_grads.iter().map(|(id, g)| (*id, g))
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.all_finite(), "tape node produced a non-finite value");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Scalar payload of a one-element node, as `f64`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar_value on a node of shape {:?}", t.dims());
        t.data()[0].to_f64_lossy()
    }

    /// Constant input; receives a gradient slot but no parameter binding.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// One-element constant.
    pub fn scalar(&mut self, v: T) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    /// Differentiable leaf bound to `id`; gradients accumulate across all
    /// bindings of the same id.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Param);
        self.bindings.push((id, v.0));
        v
    }

    fn assert_same_dims(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.dims(a),
            self.dims(b),
            "{what} operand shapes differ: {:?} vs {:?}",
            self.dims(a),
            self.dims(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "add");
        let mut out = self.nodes[a.0].value.clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + *r;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "sub");
        let mut out = self.nodes[a.0].value.clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o - *r;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "mul");
        let mut out = self.nodes[a.0].value.clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * *r;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "div");
        let mut out = self.nodes[a.0].value.clone();
        for (o, r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o / *r;
        }
        self.push(out, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o + s;
        }
        self.push(out, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o * s;
        }
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            if *o < T::zero() {
                *o = T::zero();
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = T::one() / (T::one() + (-*o).exp());
        }
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = o.abs();
        }
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o * *o;
        }
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            assert!(*o >= T::zero(), "sqrt of a negative tape value");
            *o = o.sqrt();
        }
        self.push(out, Op::Sqrt(a))
    }

    /// Clamp to `[0, 1]`. Gradient passes where the input already lies in
    /// `[0, 1]` and is zero where the clamp is active.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            if *o < T::zero() {
                *o = T::zero();
            } else if *o > T::one() {
                *o = T::one();
            }
        }
        self.push(out, Op::Clamp01(a))
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn mul_broadcast(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).len(),
            1,
            "mul_broadcast scale must have one element, got {:?}",
            self.dims(s)
        );
        let sv = self.value(s).data()[0];
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o * sv;
        }
        self.push(out, Op::MulBroadcast(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = conv::matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::Matmul { a, b, ta, tb })
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Var {
        let out = self.nodes[a.0].value.clone().reshaped(dims);
        self.push(out, Op::Reshape(a))
    }

    /// Per-row top-`k` softmax over a 2-d node. Exactly `k` entries per row
    /// carry nonzero weight; ties at the selection boundary resolve toward
    /// the lower column index.
    pub fn topk_softmax_rows(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 2, "topk softmax expects [rows, cols]");
        let (rows, cols) = (t.dims()[0], t.dims()[1]);
        assert!(k >= 1 && k <= cols, "top-k of {k} outside 1..={cols}");
        let mut out = Tensor::zeros(vec![rows, cols]);
        let mut kept = vec![false; rows * cols];
        let mut order: Vec<usize> = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            order.clear();
            order.extend(0..cols);
            order.sort_unstable_by(|&i, &j| {
                row[j].partial_cmp(&row[i]).expect("non-finite attention score").then(i.cmp(&j))
            });
            let sel = &order[..k];
            let mut max = row[sel[0]];
            for &i in sel {
                if row[i] > max {
                    max = row[i];
                }
            }
            let mut denom = T::zero();
            for &i in sel {
                let e = (row[i] - max).exp();
                out.data_mut()[r * cols + i] = e;
                kept[r * cols + i] = true;
                denom = denom + e;
            }
            for &i in sel {
                out.data_mut()[r * cols + i] = out.data()[r * cols + i] / denom;
            }
        }
        self.push(out, Op::TopkSoftmaxRows { x, kept })
    }

    /// Concatenates along the leading dimension; trailing dimensions must
    /// match. Planar layout makes each part a contiguous slab.
    pub fn concat_dim0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tail = self.dims(parts[0])[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            assert_eq!(
                &self.dims(p)[1..],
                tail.as_slice(),
                "concat trailing dimensions differ"
            );
            lead += self.dims(p)[0];
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(dims.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_vec(dims, data), Op::ConcatDim0(parts.to_vec()))
    }

    /// Contiguous slice `[start, start + len)` along the leading dimension.
    pub fn slice_dim0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let lead = t.dims()[0];
        assert!(start + len <= lead, "slice {start}+{len} exceeds leading dim {lead}");
        let inner: usize = t.dims()[1..].iter().product();
        let mut dims = vec![len];
        dims.extend_from_slice(&t.dims()[1..]);
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        self.push(Tensor::from_vec(dims, data), Op::SliceDim0 { x, start })
    }

    pub fn reduce_mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "reduce_mean_spatial expects [c, h, w]");
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let inv = T::of_usize(h * w).recip();
        let mut out = Tensor::zeros(vec![c, 1, 1]);
        for ch in 0..c {
            let mut acc = T::zero();
            for v in t.plane(ch) {
                acc = acc + *v;
            }
            out.data_mut()[ch] = acc * inv;
        }
        self.push(out, Op::ReduceMeanSpatial(x))
    }

    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "broadcast_spatial expects [c, 1, 1]");
        assert_eq!((t.dims()[1], t.dims()[2]), (1, 1), "broadcast_spatial source not [c,1,1]");
        let c = t.dims()[0];
        let mut out = Tensor::zeros(vec![c, h, w]);
        for ch in 0..c {
            let v = t.data()[ch];
            for o in out.plane_mut(ch) {
                *o = v;
            }
        }
        self.push(out, Op::BroadcastSpatial(x))
    }

    pub fn reduce_mean_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "reduce_mean_channels expects [c, h, w]");
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let inv = T::of_usize(c).recip();
        let mut out = Tensor::zeros(vec![1, h, w]);
        for ch in 0..c {
            let plane = t.plane(ch);
            for (o, v) in out.data_mut().iter_mut().zip(plane) {
                *o = *o + *v;
            }
        }
        for o in out.data_mut() {
            *o = *o * inv;
        }
        self.push(out, Op::ReduceMeanChannels(x))
    }

    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "broadcast_channels expects [1, h, w]");
        assert_eq!(t.dims()[0], 1, "broadcast_channels source not [1,h,w]");
        let (h, w) = (t.dims()[1], t.dims()[2]);
        let mut out = Tensor::zeros(vec![c, h, w]);
        for ch in 0..c {
            out.plane_mut(ch).copy_from_slice(t.plane(0));
        }
        self.push(out, Op::BroadcastChannels(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let inv = T::of_usize(t.len()).recip();
        let mut acc = T::zero();
        for v in t.data() {
            acc = acc + *v;
        }
        self.push(Tensor::scalar(acc * inv), Op::MeanAll(x))
    }

    pub fn avg_pool_block(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "avg_pool_block expects [c, h, w]");
        assert!(k >= 1);
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let (oh, ow) = (h / k, w / k);
        assert!(oh >= 1 && ow >= 1, "pool block {k} larger than input {h}x{w}");
        let inv = T::of_usize(k * k).recip();
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        for ch in 0..c {
            let plane = t.plane(ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + plane[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out.data_mut()[(ch * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        self.push(out, Op::AvgPoolBlock { x, k })
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        dilation: usize,
        pad: usize,
    ) -> Var {
        let spec = ConvSpec { groups, dilation, pad };
        if let Some(bias) = b {
            assert_eq!(
                self.value(bias).len(),
                self.dims(w)[0],
                "conv bias length must equal output channels"
            );
        }
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            &spec,
        );
        self.push(out, Op::Conv2d { x, w, b, spec })
    }

    pub fn depthwise_fixed(
        &mut self,
        x: Var,
        kernel: Tensor<T>,
        pad: PadMode,
        stride: usize,
    ) -> Var {
        let out = conv::depthwise_fixed_forward(self.value(x), &kernel, pad, stride);
        self.push(out, Op::DepthwiseFixed { x, kernel, pad, stride })
    }

    /// Scalar `(sum of squared horizontal diffs + vertical diffs) / count`.
    pub fn smoothness_tv(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.dims().len(), 3, "smoothness_tv expects [c, h, w]");
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let mut acc = T::zero();
        for ch in 0..c {
            let plane = t.plane(ch);
            for y in 0..h {
                for x_ in 0..w {
                    if x_ + 1 < w {
                        let d = plane[y * w + x_ + 1] - plane[y * w + x_];
                        acc = acc + d * d;
                    }
                    if y + 1 < h {
                        let d = plane[(y + 1) * w + x_] - plane[y * w + x_];
                        acc = acc + d * d;
                    }
                }
            }
        }
        let inv = T::of_usize(c * h * w).recip();
        self.push(Tensor::scalar(acc * inv), Op::SmoothnessTv(x))
    }

    /// Reverse pass from a one-element root node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.dims(root)
        );
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_grads: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (id, node) in &self.bindings {
            if let Some(g) = &grads[*node] {
                match param_grads.get_mut(id) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *v;
                        }
                    }
                    None => {
                        param_grads.insert(*id, g.clone());
                    }
                }
            }
        }
        Gradients { node_grads: grads, param_grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        update: impl FnOnce(&mut Tensor<T>),
    ) {
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.dims(target).to_vec()));
        }
        update(slot.as_mut().expect("gradient slot just initialized"));
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g.data()));
                self.accumulate(grads, *b, |d| add_into(d, g.data()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g.data()));
                self.accumulate(grads, *b, |d| sub_into(d, g.data()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, g), b) in d.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d = *d + *g * *b;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), a) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d = *d + *g * *a;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, g), b) in d.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d = *d + *g / *b;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (((d, g), a), b) in
                        d.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(bv.data())
                    {
                        *d = *d - *g * *a / (*b * *b);
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |d| add_into(d, g.data()));
            }
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, |d| {
                    for (d, g) in d.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + *g * s;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *x > T::zero() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[i].value;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *d = *d + *g * *y * (T::one() - *y);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *x > T::zero() {
                            *d = *d + *g;
                        } else if *x < T::zero() {
                            *d = *d - *g;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let two = T::of_f64(2.0);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d = *d + *g * two * *x;
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[i].value;
                let half = T::of_f64(0.5);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *d = *d + *g * half / *y;
                    }
                });
            }
            Op::Clamp01(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *x >= T::zero() && *x <= T::one() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::MulBroadcast(a, s) => {
                let av = self.value(*a);
                let sv = self.value(*s).data()[0];
                self.accumulate(grads, *a, |d| {
                    for (d, g) in d.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + *g * sv;
                    }
                });
                let mut acc = T::zero();
                for (g, a) in g.data().iter().zip(av.data()) {
                    acc = acc + *g * *a;
                }
                self.accumulate(grads, *s, |d| {
                    d.data_mut()[0] = d.data()[0] + acc;
                });
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = if !*ta {
                    conv::matmul(g, false, bv, !*tb)
                } else {
                    conv::matmul(bv, *tb, g, true)
                };
                let db = if !*tb {
                    conv::matmul(av, !*ta, g, false)
                } else {
                    conv::matmul(g, true, av, *ta)
                };
                self.accumulate(grads, *a, |d| add_into(d, da.data()));
                self.accumulate(grads, *b, |d| add_into(d, db.data()));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| add_into(d, g.data()));
            }
            Op::TopkSoftmaxRows { x, kept } => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.dims()[0], y.dims()[1]);
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    let base = r * cols;
                    let mut s = T::zero();
                    for c in 0..cols {
                        if kept[base + c] {
                            s = s + y.data()[base + c] * g.data()[base + c];
                        }
                    }
                    for c in 0..cols {
                        if kept[base + c] {
                            dx.data_mut()[base + c] =
                                y.data()[base + c] * (g.data()[base + c] - s);
                        }
                    }
                }
                self.accumulate(grads, *x, |d| add_into(d, dx.data()));
            }
            Op::ConcatDim0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g.data()[offset..offset + len];
                    self.accumulate(grads, p, |d| add_into(d, slice));
                    offset += len;
                }
            }
            Op::SliceDim0 { x, start } => {
                let inner: usize = self.dims(*x)[1..].iter().product();
                let offset = start * inner;
                let len = g.len();
                self.accumulate(grads, *x, |d| {
                    let dst = &mut d.data_mut()[offset..offset + len];
                    for (d, g) in dst.iter_mut().zip(g.data()) {
                        *d = *d + *g;
                    }
                });
            }
            Op::ReduceMeanSpatial(x) => {
                let xd = self.dims(*x);
                let (c, h, w) = (xd[0], xd[1], xd[2]);
                let inv = T::of_usize(h * w).recip();
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv;
                        for v in d.plane_mut(ch) {
                            *v = *v + gv;
                        }
                    }
                });
            }
            Op::BroadcastSpatial(x) => {
                let gd = g.dims();
                let (c, h, w) = (gd[0], gd[1], gd[2]);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for v in &g.data()[ch * h * w..(ch + 1) * h * w] {
                            acc = acc + *v;
                        }
                        d.data_mut()[ch] = d.data()[ch] + acc;
                    }
                });
            }
            Op::ReduceMeanChannels(x) => {
                let xd = self.dims(*x);
                let (c, hw) = (xd[0], xd[1] * xd[2]);
                let inv = T::of_usize(c).recip();
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        let plane = &mut d.data_mut()[ch * hw..(ch + 1) * hw];
                        for (v, gv) in plane.iter_mut().zip(g.data()) {
                            *v = *v + *gv * inv;
                        }
                    }
                });
            }
            Op::BroadcastChannels(x) => {
                let gd = g.dims();
                let (c, hw) = (gd[0], gd[1] * gd[2]);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        let plane = &g.data()[ch * hw..(ch + 1) * hw];
                        for (v, gv) in d.data_mut().iter_mut().zip(plane) {
                            *v = *v + *gv;
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gv = g.data()[0] * T::of_usize(n).recip();
                self.accumulate(grads, *x, |d| {
                    for v in d.data_mut() {
                        *v = *v + gv;
                    }
                });
            }
            Op::AvgPoolBlock { x, k } => {
                let xd = self.dims(*x);
                let (c, h, w) = (xd[0], xd[1], xd[2]);
                let k = *k;
                let (oh, ow) = (h / k, w / k);
                let inv = T::of_usize(k * k).recip();
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(ch * oh + oy) * ow + ox] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let idx =
                                            (ch * h + oy * k + dy) * w + ox * k + dx;
                                        d.data_mut()[idx] = d.data()[idx] + gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), g, spec);
                self.accumulate(grads, *x, |d| add_into(d, dx.data()));
                self.accumulate(grads, *w, |d| add_into(d, dw.data()));
                if let Some(bias) = b {
                    self.accumulate(grads, *bias, |d| add_into(d, db.data()));
                }
            }
            Op::DepthwiseFixed { x, kernel, pad, stride } => {
                let dx =
                    conv::depthwise_fixed_backward(self.dims(*x), kernel, g, *pad, *stride);
                self.accumulate(grads, *x, |d| add_into(d, dx.data()));
            }
            Op::SmoothnessTv(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let scale = g.data()[0] * T::of_f64(2.0) * T::of_usize(c * h * w).recip();
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        let plane = xv.plane(ch);
                        let dplane = &mut d.data_mut()[ch * h * w..(ch + 1) * h * w];
                        for y in 0..h {
                            for x_ in 0..w {
                                if x_ + 1 < w {
                                    let diff =
                                        (plane[y * w + x_ + 1] - plane[y * w + x_]) * scale;
                                    dplane[y * w + x_ + 1] = dplane[y * w + x_ + 1] + diff;
                                    dplane[y * w + x_] = dplane[y * w + x_] - diff;
                                }
                                if y + 1 < h {
                                    let diff =
                                        (plane[(y + 1) * w + x_] - plane[y * w + x_]) * scale;
                                    dplane[(y + 1) * w + x_] = dplane[(y + 1) * w + x_] + diff;
                                    dplane[y * w + x_] = dplane[y * w + x_] - diff;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn sub_into<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d = *d - *s;
    }
}
