//! Image container, color-space conversions, and aligned RGB/IR pairs.
//!
//! Pixel values are floating point in `[0, 1]` regardless of on-disk bit
//! depth; loaders divide 8-bit samples by 255. The YCbCr conversion uses the
//! ITU-R BT.601 full-range matrix with the chroma channels offset by 0.5, so
//! an achromatic pixel maps to `(y, 0.5, 0.5)`. This is the single place the
//! convention is defined; fusion, losses, and metrics all go through it.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KR: f32 = 0.299;
const KB: f32 = 0.114;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
            ColorSpace::Gray => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::YCbCr => "YCbCr",
            ColorSpace::Gray => "GRAY",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

/// H×W raster with 1 (GRAY) or 3 (RGB/YCbCr) channel planes in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    color_space: ColorSpace,
    data: Tensor<f32>,
}

impl Image {
    /// Wraps a `[c, h, w]` tensor, clamping every sample into `[0, 1]`.
    pub fn new(color_space: ColorSpace, mut data: Tensor<f32>) -> Result<Self> {
        if data.dims().len() != 3 {
            return Err(Error::dimension(format!(
                "image tensor must be [c, h, w], got {:?}",
                data.dims()
            )));
        }
        let (h, w) = (data.dims()[1], data.dims()[2]);
        if data.channels() != color_space.channels() {
            return Err(Error::dimension(format!(
                "{} image needs {} channels, got {}",
                color_space.name(),
                color_space.channels(),
                data.channels()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::dimension("image must be at least 1x1"));
        }
        if !data.all_finite() {
            return Err(Error::numeric("image contains non-finite samples"));
        }
        for v in data.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image { color_space, data })
    }

    pub fn zeros(color_space: ColorSpace, h: usize, w: usize) -> Self {
        Image {
            color_space,
            data: Tensor::map(color_space.channels(), h, w),
        }
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn size(&self) -> (usize, usize) {
        self.data.hw()
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.at3(c, y, x)
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        *self.data.at3_mut(c, y, x) = v.clamp(0.0, 1.0);
    }

    /// Single-channel view of channel `c` as a GRAY image.
    pub fn channel(&self, c: usize) -> Image {
        let (h, w) = self.size();
        Image {
            color_space: ColorSpace::Gray,
            data: Tensor::from_vec(&[1, h, w], self.data.plane(c).to_vec()),
        }
    }

    /// Luminance plane: the Y channel for YCbCr, the BT.601 luma for RGB,
    /// and the image itself for GRAY.
    pub fn luma(&self) -> Image {
        match self.color_space {
            ColorSpace::Gray => self.clone(),
            ColorSpace::YCbCr => self.channel(0),
            ColorSpace::Rgb => {
                let (h, w) = self.size();
                let mut out = Tensor::map(1, h, w);
                let (r, g, b) = (self.data.plane(0), self.data.plane(1), self.data.plane(2));
                let kg = 1.0 - KR - KB;
                for (i, o) in out.plane_mut(0).iter_mut().enumerate() {
                    *o = (KR * r[i] + kg * g[i] + KB * b[i]).clamp(0.0, 1.0);
                }
                Image {
                    color_space: ColorSpace::Gray,
                    data: out,
                }
            }
        }
    }

    fn expect_space(&self, expected: ColorSpace) -> Result<()> {
        if self.color_space != expected {
            return Err(Error::InvalidColorSpace {
                expected: expected.name(),
                got: self.color_space.name(),
            });
        }
        Ok(())
    }
}

/// BT.601 full-range RGB -> YCbCr. Chroma planes carry a 0.5 offset so the
/// achromatic axis sits at (y, 0.5, 0.5).
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Rgb)?;
    let (h, w) = img.size();
    let kg = 1.0 - KR - KB;
    let mut out = Tensor::map(3, h, w);
    for i in 0..h * w {
        let r = img.tensor().plane(0)[i];
        let g = img.tensor().plane(1)[i];
        let b = img.tensor().plane(2)[i];
        let y = KR * r + kg * g + KB * b;
        let cb = 0.5 + (b - y) / (2.0 * (1.0 - KB));
        let cr = 0.5 + (r - y) / (2.0 * (1.0 - KR));
        out.plane_mut(0)[i] = y;
        out.plane_mut(1)[i] = cb;
        out.plane_mut(2)[i] = cr;
    }
    Image::new(ColorSpace::YCbCr, out)
}

/// Inverse of [`rgb_to_ycbcr`]; output clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::YCbCr)?;
    let (h, w) = img.size();
    let kg = 1.0 - KR - KB;
    let mut out = Tensor::map(3, h, w);
    for i in 0..h * w {
        let y = img.tensor().plane(0)[i];
        let cb = img.tensor().plane(1)[i] - 0.5;
        let cr = img.tensor().plane(2)[i] - 0.5;
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / kg;
        out.plane_mut(0)[i] = r;
        out.plane_mut(1)[i] = g;
        out.plane_mut(2)[i] = b;
    }
    Image::new(ColorSpace::Rgb, out)
}

/// Replaces the Y plane of a YCbCr image, keeping chroma untouched.
pub fn with_luma(ycbcr: &Image, y: &Image) -> Result<Image> {
    ycbcr.expect_space(ColorSpace::YCbCr)?;
    y.expect_space(ColorSpace::Gray)?;
    if ycbcr.size() != y.size() {
        return Err(Error::dimension(format!(
            "luma {:?} does not match chroma carrier {:?}",
            y.size(),
            ycbcr.size()
        )));
    }
    let mut out = ycbcr.clone();
    out.data.plane_mut(0).copy_from_slice(y.tensor().plane(0));
    Ok(out)
}

/// Pixel-aligned visible/infrared pair.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub visible: Image,
    pub infrared: Image,
    pub id: String,
    pub split: Split,
}

impl ImagePair {
    pub fn new(visible: Image, infrared: Image, id: String, split: Split) -> Result<Self> {
        if visible.color_space() != ColorSpace::Rgb {
            return Err(Error::InvalidColorSpace {
                expected: "RGB",
                got: visible.color_space().name(),
            });
        }
        if infrared.color_space() != ColorSpace::Gray {
            return Err(Error::InvalidColorSpace {
                expected: "GRAY",
                got: infrared.color_space().name(),
            });
        }
        if visible.size() != infrared.size() {
            return Err(Error::dimension(format!(
                "pair '{}': visible {:?} and infrared {:?} differ",
                id,
                visible.size(),
                infrared.size()
            )));
        }
        Ok(ImagePair {
            visible,
            infrared,
            id,
            split,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.visible.size()
    }
}
