//! Fusion-quality metric battery.
//!
//! Eleven metrics (PSNR, SSIM, MS-SSIM, MI, VIF, CC, three feature
//! mutual-information variants, MSE, Qabf) scored over aligned luminance
//! planes, plus the optional sum of correlations of differences. Every
//! metric is a pure f64 function of its inputs, so repeated evaluation is
//! bit-identical.
//!
//! Two-source conventions (fixed here, applied everywhere): PSNR and MSE
//! use the mean of the two source-to-fused squared errors, SSIM, MS-SSIM,
//! VIF, and CC average the two source scores, MI sums them, the feature
//! mutual-information variants average them, and Qabf is natively
//! three-input. Relative comparisons are insensitive to these choices; the
//! absolute values are only comparable under the same conventions.

#[allow(unused_imports)]
use num_traits::Float;

mod fmi;
mod qabf;
mod ssim;
mod vif;

pub use fmi::{fmi, FmiFeature};
pub use qabf::qabf;
pub use ssim::{ms_ssim, ssim};
pub use vif::vif;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// PSNR reported for an exact match, standing in for +infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Histogram resolution shared by the intensity mutual-information metrics.
pub const DEFAULT_BINS: usize = 256;

pub(crate) fn check_same(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize)> {
    if a.dims().len() != 2 {
        return Err(Error::dimension(alloc::format!(
            "metrics expect [h, w] planes, got {:?}",
            a.dims()
        )));
    }
    if a.dims() != b.dims() {
        return Err(Error::dimension(alloc::format!(
            "plane shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a.dims()[0], a.dims()[1]))
}

/// Luminance of any supported image as a `[h, w]` double plane.
pub fn luma_plane(img: &Image) -> Tensor<f64> {
    let (h, w) = img.size();
    let y = img.luma();
    Tensor::from_vec(
        alloc::vec![h, w],
        y.tensor().data().iter().map(|v| *v as f64).collect(),
    )
}

/// Mean squared error.
pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

fn psnr_of_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio for dynamic range 1, in dB. An exact match
/// reports [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(psnr_of_mse(mse(a, b)?))
}

/// Pearson correlation of the flattened planes. Constant input is an error
/// because the correlation is undefined there.
pub fn correlation_coefficient(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same(a, b)?;
    correlation_slices(a.data(), b.data())
}

fn correlation_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    if va <= 0.0 {
        return Err(Error::ZeroVariance("first"));
    }
    if vb <= 0.0 {
        return Err(Error::ZeroVariance("second"));
    }
    // Mathematically bounded to [-1, 1]; clamp away the last-ulp overshoot
    // so identical inputs report exactly 1.
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub(crate) fn quantize(v: f64, bins: usize) -> usize {
    let q = (v.clamp(0.0, 1.0) * bins as f64) as usize;
    q.min(bins - 1)
}

/// Mutual information of the quantized intensity distributions, in bits.
pub fn mutual_information(a: &Tensor<f64>, b: &Tensor<f64>, bins: usize) -> Result<f64> {
    check_same(a, b)?;
    if bins < 2 {
        return Err(Error::config(alloc::format!("need at least 2 bins, got {bins}")));
    }
    let mut joint = alloc::vec![0u64; bins * bins];
    for (x, y) in a.data().iter().zip(b.data()) {
        joint[quantize(*x, bins) * bins + quantize(*y, bins)] += 1;
    }
    let n = a.len() as f64;
    let mut pa = alloc::vec![0.0f64; bins];
    let mut pb = alloc::vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Sum of correlations of differences:
/// `corr(fused - a, b) + corr(fused - b, a)`; a degenerate (constant) term
/// contributes 0.
pub fn scd(a: &Tensor<f64>, b: &Tensor<f64>, fused: &Tensor<f64>) -> Result<f64> {
    check_same(a, b)?;
    check_same(a, fused)?;
    let diff = |x: &Tensor<f64>, y: &Tensor<f64>| -> Vec<f64> {
        x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect()
    };
    let term = |d: &[f64], s: &[f64]| correlation_slices(d, s).unwrap_or(0.0);
    Ok(term(&diff(fused, a), b.data()) + term(&diff(fused, b), a.data()))
}

/// One evaluated pair: every metric of the battery plus the optional
/// difference-correlation score.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pair_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mi: f64,
    pub vif: f64,
    pub cc: f64,
    pub fmi_pixel: f64,
    pub fmi_dct: f64,
    pub fmi_w: f64,
    pub mse: f64,
    pub qabf: f64,
    pub scd: Option<f64>,
}

impl MetricReport {
    /// The eleven core metrics in reporting order.
    pub fn core_values(&self) -> [(&'static str, f64); 11] {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("ms_ssim", self.ms_ssim),
            ("mi", self.mi),
            ("vif", self.vif),
            ("cc", self.cc),
            ("fmi_pixel", self.fmi_pixel),
            ("fmi_dct", self.fmi_dct),
            ("fmi_w", self.fmi_w),
            ("mse", self.mse),
            ("qabf", self.qabf),
        ]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let scd = if reports.iter().all(|r| r.scd.is_some()) {
            Some(reports.iter().map(|r| r.scd.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        Some(MetricReport {
            pair_id: String::from("mean"),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            ms_ssim: avg(|r| r.ms_ssim),
            mi: avg(|r| r.mi),
            vif: avg(|r| r.vif),
            cc: avg(|r| r.cc),
            fmi_pixel: avg(|r| r.fmi_pixel),
            fmi_dct: avg(|r| r.fmi_dct),
            fmi_w: avg(|r| r.fmi_w),
            mse: avg(|r| r.mse),
            qabf: avg(|r| r.qabf),
            scd,
        })
    }
}

/// Scores a fused image against its two aligned sources on luminance planes
/// using the conventions documented at the module level.
pub fn evaluate_pair(
    pair_id: &str,
    visible: &Image,
    infrared: &Image,
    fused: &Image,
    include_scd: bool,
) -> Result<MetricReport> {
    let v = luma_plane(visible);
    let i = luma_plane(infrared);
    let f = luma_plane(fused);
    check_same(&v, &i)?;
    check_same(&v, &f)?;

    let mse_v = mse(&v, &f)?;
    let mse_i = mse(&i, &f)?;
    let mse_mean = 0.5 * (mse_v + mse_i);

    Ok(MetricReport {
        pair_id: String::from(pair_id),
        psnr: psnr_of_mse(mse_mean),
        ssim: 0.5 * (ssim(&v, &f)? + ssim(&i, &f)?),
        ms_ssim: 0.5 * (ms_ssim(&v, &f)? + ms_ssim(&i, &f)?),
        mi: mutual_information(&v, &f, DEFAULT_BINS)?
            + mutual_information(&i, &f, DEFAULT_BINS)?,
        vif: 0.5 * (vif(&v, &f)? + vif(&i, &f)?),
        cc: 0.5 * (correlation_coefficient(&v, &f)? + correlation_coefficient(&i, &f)?),
        fmi_pixel: fmi(&v, &i, &f, FmiFeature::Pixel)?,
        fmi_dct: fmi(&v, &i, &f, FmiFeature::Dct)?,
        fmi_w: fmi(&v, &i, &f, FmiFeature::Wavelet)?,
        mse: mse_mean,
        qabf: qabf(&v, &i, &f)?,
        scd: if include_scd { Some(scd(&v, &i, &f)?) } else { None },
    })
}
