//! Dense row-major tensor used for feature maps, weights, and images.
//!
//! Feature maps are stored channel-planar as `[c, h, w]`: plane `c` is a
//! contiguous `h*w` block. Matrices are `[rows, cols]`, convolution weights
//! `[out_c, in_c_per_group, kh, kw]`, vectors `[n]`, scalars `[1]`.
//! A `[c, h, w]` map reinterpreted as a `[c, h*w]` matrix is exactly the
//! channel-token view used by the attention blocks, with no data movement.

use alloc::vec;
use alloc::vec::Vec;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Tensor { dims, data: vec![T::zero(); n] }
    }

    pub fn filled(dims: impl Into<Vec<usize>>, v: T) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Tensor { dims, data: vec![v; n] }
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let dims = dims.into();
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length must match dims"
        );
        Tensor { dims, data }
    }

    /// Feature map constructor: `channels` planes of `h * w`.
    pub fn map(channels: usize, h: usize, w: usize) -> Self {
        Self::zeros(&[channels, h, w])
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Channel count of a `[c, h, w]` map.
    pub fn channels(&self) -> usize {
        assert_eq!(self.dims.len(), 3, "not a feature map");
        self.dims[0]
    }

    /// Spatial size `(h, w)` of a `[c, h, w]` map.
    pub fn hw(&self) -> (usize, usize) {
        assert_eq!(self.dims.len(), 3, "not a feature map");
        (self.dims[1], self.dims[2])
    }

    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> T {
        debug_assert!(self.dims.len() == 2 && y < self.dims[0] && x < self.dims[1]);
        self.data[y * self.dims[1] + x]
    }

    #[inline]
    pub fn at2_mut(&mut self, y: usize, x: usize) -> &mut T {
        debug_assert!(self.dims.len() == 2 && y < self.dims[0] && x < self.dims[1]);
        &mut self.data[y * self.dims[1] + x]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.dims[1], self.dims[2]);
        debug_assert!(c < self.dims[0] && y < h && x < w);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let (h, w) = (self.dims[1], self.dims[2]);
        debug_assert!(c < self.dims[0] && y < h && x < w);
        &mut self.data[(c * h + y) * w + x]
    }

    /// Contiguous plane `c` of a `[c, h, w]` map.
    pub fn plane(&self, c: usize) -> &[T] {
        let (h, w) = (self.dims[1], self.dims[2]);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let (h, w) = (self.dims[1], self.dims[2]);
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Same buffer under new dims; element counts must agree.
    pub fn reshaped(mut self, dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        assert_eq!(
            dims.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve element count"
        );
        self.dims = dims;
        self
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over every element; zero for an empty tensor.
    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let mut acc = T::zero();
        for v in &self.data {
            acc = acc + *v;
        }
        acc / T::of_usize(self.data.len())
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Lossless-enough elementwise cast between scalar types.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of_f64(v.to_f64_lossy()))
                .collect(),
        }
    }
}
