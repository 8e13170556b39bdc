//! PNG reading and writing for the pipeline's image types.
//!
//! Pixels are mapped linearly between 8-bit code values and [0, 1] floats
//! (value / 255). No gamma or color management is applied; the networks and
//! metrics operate on the same code-value scale the files store.

use std::path::Path;

use anyhow::{Context, Result};
use rainfuse_core::image::{ColorSpace, Image};
use rainfuse_core::tensor::Tensor;

/// Reads a PNG as an RGB image, collapsing any alpha channel.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let decoded = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = f32::from(px.0[c]) / 255.0;
        }
    }
    let tensor = Tensor::from_vec([3, h, w], data);
    Ok(Image::new(ColorSpace::Rgb, tensor)?)
}

/// Reads a PNG as a single-channel image, converting color inputs to luma.
pub fn read_gray(path: &Path) -> Result<Image> {
    let decoded = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let gray = decoded.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for (x, y, px) in gray.enumerate_pixels() {
        data[y as usize * w + x as usize] = f32::from(px.0[0]) / 255.0;
    }
    let tensor = Tensor::from_vec([1, h, w], data);
    Ok(Image::new(ColorSpace::Gray, tensor)?)
}

/// Quantizes a channel value to an 8-bit code value with round-half-up.
fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Writes an image as a PNG. RGB and YCbCr images are stored as 8-bit RGB
/// (YCbCr is converted first); single-channel images as 8-bit grayscale.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    let (h, w) = img.size();
    match img.color_space() {
        ColorSpace::Gray => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(x as u32, y as u32, image::Luma([quantize8(img.tensor().at3(0, y, x))]));
                }
            }
            out.save(path).with_context(|| format!("writing {}", path.display()))?;
        }
        ColorSpace::Rgb | ColorSpace::YCbCr => {
            let rgb = if img.color_space() == ColorSpace::YCbCr {
                rainfuse_core::image::ycbcr_to_rgb(img)?
            } else {
                img.clone()
            };
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        quantize8(rgb.tensor().at3(0, y, x)),
                        quantize8(rgb.tensor().at3(1, y, x)),
                        quantize8(rgb.tensor().at3(2, y, x)),
                    ];
                    out.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            out.save(path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_rgb(h: usize, w: usize) -> Image {
        let mut t = Tensor::zeros([3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    *t.at3_mut(c, y, x) = ((c + 1) * (y * w + x)) as f32 / (3 * h * w) as f32;
                }
            }
        }
        Image::new(ColorSpace::Rgb, t).unwrap()
    }

    #[test]
    fn rgb_round_trip_is_exact_on_code_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.png");
        let img = ramp_rgb(9, 13);
        write_png(&path, &img).unwrap();
        let back = read_rgb(&path).unwrap();
        assert_eq!(back.size(), (9, 13));
        // Write-read-write must be idempotent: code values survive exactly.
        let path2 = dir.path().join("ramp2.png");
        write_png(&path2, &back).unwrap();
        let again = read_rgb(&path2).unwrap();
        assert_eq!(back.tensor().data(), again.tensor().data());
    }

    #[test]
    fn gray_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let mut t = Tensor::zeros([1, 5, 7]);
        for i in 0..35 {
            t.data_mut()[i] = i as f32 / 34.0;
        }
        let img = Image::new(ColorSpace::Gray, t).unwrap();
        write_png(&path, &img).unwrap();
        let back = read_gray(&path).unwrap();
        for i in 0..35 {
            let expect = f32::from(quantize8(i as f32 / 34.0)) / 255.0;
            assert!((back.tensor().data()[i] - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_rgb(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(format!("{err:#}").contains("nope.png"));
    }
}
