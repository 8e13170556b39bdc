//! Aligned random patch extraction for training crops.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Image, ImagePair};
use crate::rng;
use crate::tensor::Tensor;

/// Square crop request: `count_per_image` crops of `size`×`size`, seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchSpec {
    pub size: usize,
    pub count_per_image: usize,
    pub seed: u64,
}

/// One aligned visible/infrared crop with its source offset.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub visible: Image,
    pub infrared: Image,
    pub row: usize,
    pub col: usize,
}

/// Crops `img` at (`row`, `col`) to `size`×`size`.
pub fn crop(img: &Image, row: usize, col: usize, size: usize) -> Result<Image> {
    let (h, w) = img.size();
    if row + size > h || col + size > w {
        return Err(Error::dimension(format!(
            "crop {size}x{size} at ({row}, {col}) exceeds {h}x{w}"
        )));
    }
    let c = img.channels();
    let mut out = Tensor::map(c, size, size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                *out.at3_mut(ch, y, x) = img.get(ch, row + y, col + x);
            }
        }
    }
    Image::new(img.color_space(), out)
}

/// Draws a uniformly random top-left offset for a `size` crop inside `h`×`w`.
pub fn random_offset(rng: &mut rng::Rng, h: usize, w: usize, size: usize) -> (usize, usize) {
    let row = rng::gen_index(rng, h - size + 1);
    let col = rng::gen_index(rng, w - size + 1);
    (row, col)
}

/// Cuts `spec.count_per_image` aligned patch pairs; visible and infrared are
/// cropped at identical offsets, and the sequence is fully determined by
/// `spec.seed`.
pub fn extract_patches(pair: &ImagePair, spec: &PatchSpec) -> Result<Vec<PatchPair>> {
    let (h, w) = pair.size();
    if spec.size == 0 {
        return Err(Error::config("patch size must be at least 1"));
    }
    if spec.size > h || spec.size > w {
        return Err(Error::dimension(format!(
            "patch {0}x{0} larger than image {h}x{w}",
            spec.size
        )));
    }
    let mut r = rng::seeded(spec.seed);
    let mut out = Vec::with_capacity(spec.count_per_image);
    for _ in 0..spec.count_per_image {
        let (row, col) = random_offset(&mut r, h, w, spec.size);
        out.push(PatchPair {
            visible: crop(&pair.visible, row, col, spec.size)?,
            infrared: crop(&pair.infrared, row, col, spec.size)?,
            row,
            col,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{ColorSpace, Split};

    /// Synthetic pair whose pixel values encode their own coordinates, so a
    /// misaligned crop is immediately visible.
    fn coordinate_pair(h: usize, w: usize) -> ImagePair {
        let mut vis = Tensor::map(3, h, w);
        let mut ir = Tensor::map(1, h, w);
        for y in 0..h {
            for x in 0..w {
                let code = (y * w + x) as f32 / (h * w) as f32;
                for c in 0..3 {
                    *vis.at3_mut(c, y, x) = code;
                }
                *ir.at3_mut(0, y, x) = code;
            }
        }
        ImagePair::new(
            Image::new(ColorSpace::Rgb, vis).unwrap(),
            Image::new(ColorSpace::Gray, ir).unwrap(),
            "coords".into(),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_crop_returns_whole_image() {
        let pair = coordinate_pair(64, 64);
        let spec = PatchSpec {
            size: 64,
            count_per_image: 3,
            seed: 5,
        };
        for p in extract_patches(&pair, &spec).unwrap() {
            assert_eq!((p.row, p.col), (0, 0));
            assert_eq!(p.visible, pair.visible);
        }
    }

    #[test]
    fn same_seed_gives_identical_patch_lists() {
        let pair = coordinate_pair(128, 128);
        let spec = PatchSpec {
            size: 64,
            count_per_image: 8,
            seed: 77,
        };
        let a = extract_patches(&pair, &spec).unwrap();
        let b = extract_patches(&pair, &spec).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!((pa.row, pa.col), (pb.row, pb.col));
            assert_eq!(pa.visible, pb.visible);
            assert_eq!(pa.infrared, pb.infrared);
        }
    }

    #[test]
    fn offsets_stay_within_valid_corner_range() {
        let pair = coordinate_pair(256, 256);
        let spec = PatchSpec {
            size: 64,
            count_per_image: 100,
            seed: 123,
        };
        for p in extract_patches(&pair, &spec).unwrap() {
            assert!(p.row <= 192 && p.col <= 192, "corner ({}, {})", p.row, p.col);
        }
    }

    #[test]
    fn visible_and_infrared_come_from_the_same_offset() {
        let pair = coordinate_pair(100, 90);
        let spec = PatchSpec {
            size: 32,
            count_per_image: 20,
            seed: 9,
        };
        for p in extract_patches(&pair, &spec).unwrap() {
            // coordinate encoding makes equality a positional assertion
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(p.visible.get(0, y, x), p.infrared.get(0, y, x));
                }
            }
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let pair = coordinate_pair(32, 32);
        let spec = PatchSpec {
            size: 33,
            count_per_image: 1,
            seed: 0,
        };
        assert!(matches!(
            extract_patches(&pair, &spec),
            Err(Error::Dimension(_))
        ));
    }
}
