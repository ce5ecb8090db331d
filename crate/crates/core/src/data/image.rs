use std::path::Path;

use image::{DynamicImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_IMAGE_SIZE: usize = 256;

/// Pixel value mapping applied after resizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `x/127.5 − 1`
    #[default]
    MinusOneOne,
    /// `x/255`
    ZeroOne,
}

impl Normalization {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Normalization::MinusOneOne => x / 127.5 - 1.0,
            Normalization::ZeroOne => x / 255.0,
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Normalization::MinusOneOne => (-1.0, 1.0),
            Normalization::ZeroOne => (0.0, 1.0),
        }
    }
}

/// Bilinear resize of an interleaved `h×w×c` buffer with half-pixel centers.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Resizes to `size×size`, replicates grayscale to three channels and
/// normalizes pixel values.
pub fn preprocess<T: Scalar>(img: &DynamicImage, size: usize, norm: Normalization) -> Result<Tensor<T>> {
    if size == 0 {
        return Err(Error::Param("target image size must be >= 1".into()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb: Vec<f64> = match img {
        DynamicImage::ImageLuma8(gray) => gray
            .as_raw()
            .iter()
            .flat_map(|&v| [f64::from(v); 3])
            .collect(),
        other => other.to_rgb8().as_raw().iter().map(|&v| f64::from(v)).collect(),
    };
    let resized = if (h, w) == (size, size) {
        rgb
    } else {
        resize_bilinear(&rgb, h, w, 3, size, size)
    };
    let data = resized.into_iter().map(|v| T::of(norm.apply(v))).collect();
    Tensor::new(vec![size, size, 3], data)
}

pub fn load_image<T: Scalar>(path: &Path, size: usize, norm: Normalization) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    preprocess(&img, size, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flips {
    /// Mirror left to right.
    pub horizontal: bool,
    /// Mirror top to bottom.
    pub vertical: bool,
}

pub fn apply_flips<T: Scalar>(image: &Tensor<T>, flips: Flips) -> Result<Tensor<T>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::shape("augment", format!("expected H×W×C, got {:?}", image.shape())));
    };
    if !flips.horizontal && !flips.vertical {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = if flips.vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flips.horizontal { w - 1 - x } else { x };
            let at = (sy * w + sx) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Independent fair-coin horizontal and vertical flips.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Flips)> {
    let flips = Flips {
        horizontal: rng.random_bool(0.5),
        vertical: rng.random_bool(0.5),
    };
    Ok((apply_flips(image, flips)?, flips))
}

/// Converts `[0,255]` RGB bytes to an image for writing.
pub fn rgb_image(width: u32, height: u32, pixels: Vec<u8>) -> Result<RgbImage> {
    RgbImage::from_raw(width, height, pixels)
        .ok_or_else(|| Error::shape("rgb_image", format!("buffer does not fit {width}×{height}×3")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_size_resize_is_identity() {
        let pixels: Vec<u8> = (0..256 * 256 * 3).map(|i| (i * 31 % 251) as u8).collect();
        let img = DynamicImage::ImageRgb8(rgb_image(256, 256, pixels.clone()).unwrap());
        let t: Tensor<f64> = preprocess(&img, 256, Normalization::ZeroOne).unwrap();
        for (a, &b) in t.data().iter().zip(&pixels) {
            assert!((a - f64::from(b) / 255.0).abs() < 1e-12);
        }
        let src: Vec<f64> = (0..48).map(f64::from).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 3, 4, 4), src);
    }

    #[test]
    fn black_image_maps_to_minus_one() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(40, 30));
        let t: Tensor<f32> = preprocess(&img, 256, Normalization::MinusOneOne).unwrap();
        assert_eq!(t.shape(), &[256, 256, 3]);
        assert!(t.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn constant_white_source_resizes_to_plus_one() {
        let img = DynamicImage::ImageRgb8(rgb_image(750, 500, vec![255; 750 * 500 * 3]).unwrap());
        let t: Tensor<f32> = preprocess(&img, 256, Normalization::MinusOneOne).unwrap();
        assert_eq!(t.shape(), &[256, 256, 3]);
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn grayscale_is_replicated() {
        let mut g = GrayImage::new(2, 2);
        g.put_pixel(1, 0, Luma([255]));
        let t: Tensor<f64> = preprocess(&DynamicImage::ImageLuma8(g), 2, Normalization::ZeroOne).unwrap();
        assert_eq!(&t.data()[3..6], &[1.0, 1.0, 1.0]);
        assert_eq!(&t.data()[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_midpoint() {
        // 1×2 -> 1×4 with half-pixel centers: 0, 0.25, 0.75, 1 of the step
        let out = resize_bilinear(&[0.0, 4.0], 1, 2, 1, 1, 4);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn flips_are_involutions_and_keep_symmetric_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::new(vec![4, 4, 3], (0..48).map(|i| f64::from(i) / 47.0).collect()).unwrap();
        for _ in 0..8 {
            let (once, flips) = augment(&t, &mut rng).unwrap();
            assert_eq!(apply_flips(&once, flips).unwrap(), t);
        }
        let sym = Tensor::<f64>::full(vec![4, 4, 3], 0.2);
        for f in [Flips { horizontal: true, vertical: false }, Flips { horizontal: false, vertical: true }] {
            assert_eq!(apply_flips(&sym, f).unwrap(), sym);
        }
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let t = Tensor::<f64>::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let f = apply_flips(&t, Flips { horizontal: true, vertical: false }).unwrap();
        assert_eq!(f.data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn flip_frequencies_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let t = Tensor::<f32>::zeros(vec![2, 2, 3]);
        let (mut h, mut v) = (0, 0);
        for _ in 0..10_000 {
            let (_, f) = augment(&t, &mut rng).unwrap();
            h += usize::from(f.horizontal);
            v += usize::from(f.vertical);
        }
        for n in [h, v] {
            let frac = n as f64 / 1e4;
            assert!((frac - 0.5).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn undecodable_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not an image").unwrap();
        let err = load_image::<f32>(&p, 16, Normalization::MinusOneOne).unwrap_err();
        assert!(err.to_string().contains("junk.png"), "{err}");
        let missing = load_image::<f32>(&dir.path().join("none.png"), 16, Normalization::MinusOneOne).unwrap_err();
        assert!(missing.to_string().contains("none.png"));
    }
}
