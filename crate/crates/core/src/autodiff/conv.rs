//! Direct convolution kernels shared by the tape operations.
//!
//! All loops are arranged so the innermost iteration walks contiguous rows,
//! which the compiler vectorizes. Stride is fixed at 1 for learned
//! convolutions (the networks never downsample inside a block); fixed-kernel
//! depthwise filtering supports stride for pyramid-style consumers.

use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::Scalar;

/// Learned convolution geometry: zero padding `pad`, stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub dilation: usize,
    pub pad: usize,
}

/// Border handling for fixed-kernel depthwise filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Same-size output, out-of-range taps read zero. Odd kernels only.
    Zero,
    /// Same-size output, out-of-range taps read the nearest edge sample.
    Replicate,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

pub(crate) fn conv2d_out_dims(x: &[usize], w: &[usize], s: &ConvSpec) -> Vec<usize> {
    assert_eq!(x.len(), 3, "conv input must be [c, h, w], got {x:?}");
    assert_eq!(w.len(), 4, "conv weight must be [oc, icg, kh, kw], got {w:?}");
    let (ic, h, wd) = (x[0], x[1], x[2]);
    let (oc, icg, kh, kw) = (w[0], w[1], w[2], w[3]);
    assert_eq!(ic, icg * s.groups, "input channels {ic} != {icg} * groups {}", s.groups);
    assert_eq!(oc % s.groups, 0, "output channels {oc} not divisible by groups {}", s.groups);
    let span_h = s.dilation * (kh - 1);
    let span_w = s.dilation * (kw - 1);
    assert!(
        h + 2 * s.pad > span_h && wd + 2 * s.pad > span_w,
        "kernel span exceeds padded input: input {h}x{wd}, span {span_h}x{span_w}, pad {}",
        s.pad
    );
    alloc::vec![oc, h + 2 * s.pad - span_h, wd + 2 * s.pad - span_w]
}

/// Clipped output range such that `o + k_off - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (in_len + pad - k_off).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    s: &ConvSpec,
) -> Tensor<T> {
    let od = conv2d_out_dims(x.dims(), w.dims(), s);
    let (oc, oh, ow) = (od[0], od[1], od[2]);
    let (h, wd) = (x.dims()[1], x.dims()[2]);
    let (icg, kh, kw) = (w.dims()[1], w.dims()[2], w.dims()[3]);
    let ocg = oc / s.groups;
    let mut out = Tensor::zeros(od.clone());
    let out_data = out.data_mut();
    let x_data = x.data();
    let w_data = w.data();
    for o in 0..oc {
        let g = o / ocg;
        let out_plane = &mut out_data[o * oh * ow..(o + 1) * oh * ow];
        if let Some(bias) = b {
            let bv = bias.data()[o];
            for v in out_plane.iter_mut() {
                *v = bv;
            }
        }
        for cil in 0..icg {
            let ci = g * icg + cil;
            let x_plane = &x_data[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, h, ky * s.dilation, s.pad);
                for kx in 0..kw {
                    let wv = w_data[((o * icg + cil) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = valid_range(ow, wd, kx * s.dilation, s.pad);
                    if x_lo >= x_hi {
                        continue;
                    }
                    // shift = kx*d - pad maps output column to input column
                    let shift = (kx * s.dilation) as isize - s.pad as isize;
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + (ky * s.dilation) as isize - s.pad as isize)
                            as usize;
                        let in_row = &x_plane[iy * wd..(iy + 1) * wd];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in x_lo..x_hi {
                            out_row[ox] =
                                out_row[ox] + wv * in_row[(ox as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to input, weight, and bias in one pass.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g_out: &Tensor<T>,
    s: &ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let od = conv2d_out_dims(x.dims(), w.dims(), s);
    assert_eq!(g_out.dims(), od.as_slice(), "conv gradient shape mismatch");
    let (oc, oh, ow) = (od[0], od[1], od[2]);
    let (h, wd) = (x.dims()[1], x.dims()[2]);
    let (icg, kh, kw) = (w.dims()[1], w.dims()[2], w.dims()[3]);
    let ocg = oc / s.groups;
    let mut dx = Tensor::zeros(x.dims().to_vec());
    let mut dw = Tensor::zeros(w.dims().to_vec());
    let mut db = Tensor::zeros(alloc::vec![oc]);
    let x_data = x.data();
    let w_data = w.data();
    let g_data = g_out.data();
    for o in 0..oc {
        let g = o / ocg;
        let g_plane = &g_data[o * oh * ow..(o + 1) * oh * ow];
        let mut bias_acc = T::zero();
        for gv in g_plane.iter() {
            bias_acc = bias_acc + *gv;
        }
        db.data_mut()[o] = bias_acc;
        for cil in 0..icg {
            let ci = g * icg + cil;
            let x_plane = &x_data[ci * h * wd..(ci + 1) * h * wd];
            let dx_plane = &mut dx.data_mut()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, h, ky * s.dilation, s.pad);
                for kx in 0..kw {
                    let widx = ((o * icg + cil) * kh + ky) * kw + kx;
                    let wv = w_data[widx];
                    let (x_lo, x_hi) = valid_range(ow, wd, kx * s.dilation, s.pad);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let shift = (kx * s.dilation) as isize - s.pad as isize;
                    let mut w_acc = T::zero();
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + (ky * s.dilation) as isize - s.pad as isize)
                            as usize;
                        let x_row = &x_plane[iy * wd..(iy + 1) * wd];
                        let dx_row = &mut dx_plane[iy * wd..(iy + 1) * wd];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ox in x_lo..x_hi {
                            let ix = (ox as isize + shift) as usize;
                            w_acc = w_acc + g_row[ox] * x_row[ix];
                            dx_row[ix] = dx_row[ix] + wv * g_row[ox];
                        }
                    }
                    dw.data_mut()[widx] = dw.data_mut()[widx] + w_acc;
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn depthwise_fixed_out_dims(
    x: &[usize],
    k: &[usize],
    pad: PadMode,
    stride: usize,
) -> Vec<usize> {
    assert_eq!(x.len(), 3, "depthwise input must be [c, h, w]");
    assert_eq!(k.len(), 2, "fixed kernel must be [kh, kw]");
    assert!(stride >= 1);
    let (kh, kw) = (k[0], k[1]);
    let (h, w) = (x[1], x[2]);
    let (ph, pw) = match pad {
        PadMode::Valid => (0, 0),
        PadMode::Zero | PadMode::Replicate => {
            assert!(kh % 2 == 1 && kw % 2 == 1, "same padding requires odd kernels");
            ((kh - 1) / 2, (kw - 1) / 2)
        }
    };
    assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "kernel larger than padded input");
    alloc::vec![x[0], (h + 2 * ph - kh) / stride + 1, (w + 2 * pw - kw) / stride + 1]
}

/// Resolves an input coordinate for border mode `pad`; `None` means the tap
/// reads zero.
#[inline]
fn tap_index(i: isize, len: usize, pad: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match pad {
            PadMode::Zero | PadMode::Valid => None,
            PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

pub(crate) fn depthwise_fixed_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: PadMode,
    stride: usize,
) -> Tensor<T> {
    let od = depthwise_fixed_out_dims(x.dims(), kernel.dims(), pad, stride);
    let (c, oh, ow) = (od[0], od[1], od[2]);
    let (h, w) = (x.dims()[1], x.dims()[2]);
    let (kh, kw) = (kernel.dims()[0], kernel.dims()[1]);
    let (ph, pw) = match pad {
        PadMode::Valid => (0isize, 0isize),
        _ => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };
    let mut out = Tensor::zeros(od.clone());
    for ch in 0..c {
        let x_plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let out_base = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kh {
                    let iy = match tap_index((oy * stride + ky) as isize - ph, h, pad) {
                        Some(i) => i,
                        None => continue,
                    };
                    for kx in 0..kw {
                        if let Some(ix) = tap_index((ox * stride + kx) as isize - pw, w, pad) {
                            acc = acc + kernel.data()[ky * kw + kx] * x_plane[iy * w + ix];
                        }
                    }
                }
                out.data_mut()[out_base + oy * ow + ox] = acc;
            }
        }
    }
    out
}

/// Input gradient only; the kernel is a constant.
pub(crate) fn depthwise_fixed_backward<T: Scalar>(
    x_dims: &[usize],
    kernel: &Tensor<T>,
    g_out: &Tensor<T>,
    pad: PadMode,
    stride: usize,
) -> Tensor<T> {
    let od = depthwise_fixed_out_dims(x_dims, kernel.dims(), pad, stride);
    assert_eq!(g_out.dims(), od.as_slice(), "depthwise gradient shape mismatch");
    let (c, oh, ow) = (od[0], od[1], od[2]);
    let (h, w) = (x_dims[1], x_dims[2]);
    let (kh, kw) = (kernel.dims()[0], kernel.dims()[1]);
    let (ph, pw) = match pad {
        PadMode::Valid => (0isize, 0isize),
        _ => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };
    let mut dx = Tensor::zeros(x_dims.to_vec());
    for ch in 0..c {
        let dx_plane = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
        let g_plane = &g_out.data()[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g_plane[oy * ow + ox];
                for ky in 0..kh {
                    let iy = match tap_index((oy * stride + ky) as isize - ph, h, pad) {
                        Some(i) => i,
                        None => continue,
                    };
                    for kx in 0..kw {
                        if let Some(ix) = tap_index((ox * stride + kx) as isize - pw, w, pad) {
                            dx_plane[iy * w + ix] =
                                dx_plane[iy * w + ix] + kernel.data()[ky * kw + kx] * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Plain matrix product with optional operand transposition. Storage is
/// row-major; `ta`/`tb` reinterpret the operand as its transpose.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    assert_eq!(a.dims().len(), 2, "matmul lhs must be 2-d, got {:?}", a.dims());
    assert_eq!(b.dims().len(), 2, "matmul rhs must be 2-d, got {:?}", b.dims());
    let (ar, ac) = (a.dims()[0], a.dims()[1]);
    let (br, bc) = (b.dims()[0], b.dims()[1]);
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "matmul inner dimension mismatch: {ka} vs {kb}");
    let k = ka;
    let mut out = Tensor::zeros(alloc::vec![m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * ac + p];
                    let b_row = &bd[p * bc..(p + 1) * bc];
                    let o_row = &mut od[i * n..(i + 1) * n];
                    for j in 0..n {
                        o_row[j] = o_row[j] + av * b_row[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &ad[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let b_row = &bd[j * bc..(j + 1) * bc];
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + a_row[p] * b_row[p];
                    }
                    od[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let a_row = &ad[p * ac..(p + 1) * ac];
                let b_row = &bd[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = a_row[i];
                    let o_row = &mut od[i * n..(i + 1) * n];
                    for j in 0..n {
                        o_row[j] = o_row[j] + av * b_row[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + ad[p * ac + i] * bd[j * bc + p];
                    }
                    od[i * n + j] = acc;
                }
            }
        }
    }
    out
}
