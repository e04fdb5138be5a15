//! Normalized RGB images and single-channel planes.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine map from 8-bit pixel values to model space: `p * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f32,
    pub offset: f32,
}

impl Default for Normalization {
    /// `p / 127.5 - 1`, mapping 0..=255 onto [-1, 1].
    fn default() -> Self {
        Self { scale: 1.0 / 127.5, offset: -1.0 }
    }
}

impl Normalization {
    pub fn to_model(&self, p: u8) -> f32 {
        f32::from(p) * self.scale + self.offset
    }

    pub fn to_pixel(&self, v: f32) -> u8 {
        ((v - self.offset) / self.scale).round().clamp(0.0, 255.0) as u8
    }
}

/// RGB image in model space, channel-last `(H, W, 3)`, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Wraps raw data, clamping to [-1, 1].
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * 3 {
            return Err(Error::shape((h, w, 3), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image has non-finite values".into()));
        }
        Ok(Self { h, w, data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect() })
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self { h, w, data: vec![v.clamp(-1.0, 1.0); h * w * 3] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(img: &RgbImage, norm: &Normalization) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&p| norm.to_model(p)).collect();
        Self { h: h as usize, w: w as usize, data }
    }

    pub fn to_rgb8(&self, norm: &Normalization) -> RgbImage {
        let raw = self.data.iter().map(|&v| norm.to_pixel(v)).collect();
        RgbImage::from_raw(self.w as u32, self.h as u32, raw).expect("buffer sized from dims")
    }

    pub fn read_png(path: &Path, norm: &Normalization) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8(), norm))
    }

    pub fn write_png(&self, path: &Path, norm: &Normalization) -> Result<()> {
        self.to_rgb8(norm).save(path).map_err(|source| Error::Image { path: path.into(), source })
    }

    /// PNG-encoded bytes.
    pub fn to_png_bytes(&self, norm: &Normalization) -> Vec<u8> {
        encode_png(&image::DynamicImage::ImageRgb8(self.to_rgb8(norm)))
    }

    pub fn from_png_bytes(bytes: &[u8], norm: &Normalization) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: "<memory>".into(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8(), norm))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Single-channel real plane `(H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape((h, w), data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn encode_png(img: &image::DynamicImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Writes a binary mask as an 8-bit PNG with values 0/255.
pub fn mask_to_gray(mask: &[bool], h: usize, w: usize) -> GrayImage {
    GrayImage::from_raw(w as u32, h as u32, mask.iter().map(|&m| if m { 255 } else { 0 }).collect()).expect("mask sized from dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trips_every_byte() {
        let n = Normalization::default();
        assert_eq!(n.to_model(0), -1.0);
        assert_eq!(n.to_model(255), 1.0);
        for p in 0..=255u8 {
            assert_eq!(n.to_pixel(n.to_model(p)), p);
        }
        assert!(n.to_model(128) > 0.0);
        assert!(n.to_model(127) < 0.0);
    }

    #[test]
    fn png_bytes_round_trip() {
        let n = Normalization::default();
        let data: Vec<f32> = (0..4 * 2 * 3).map(|i| n.to_model((i * 10) as u8)).collect();
        let img = ImageTensor::new(4, 2, data).unwrap();
        let back = ImageTensor::from_png_bytes(&img.to_png_bytes(&n), &n).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn construction_clamps_and_rejects_bad_shapes() {
        let img = ImageTensor::new(1, 1, vec![2.0, -3.0, 0.5]).unwrap();
        assert_eq!(img.data(), &[1.0, -1.0, 0.5]);
        assert!(ImageTensor::new(2, 2, vec![0.0; 5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![f32::NAN, 0.0, 0.0]).is_err());
    }
}
