//! Single-channel intensity images and their on-disk forms (PGM P5, PNG).

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!(
                "image data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    /// Pixel lookup with edge replication for out-of-range coordinates.
    pub fn get_clamped(&self, row: isize, col: isize) -> f32 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mirror left-right: pixel (r, c) moves to (r, W-1-c).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn squared_distance(&self, other: &GrayImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum()
    }

    /// Pixelwise arithmetic mean; all images must share dimensions.
    pub fn mean_of(images: &[&GrayImage]) -> Result<GrayImage> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot average zero images"))?;
        let mut acc = vec![0.0f64; first.data.len()];
        for img in images {
            if img.height != first.height || img.width != first.width {
                return Err(Error::invalid("cannot average images of different sizes"));
            }
            for (a, &v) in acc.iter_mut().zip(&img.data) {
                *a += v as f64;
            }
        }
        let n = images.len() as f64;
        Ok(GrayImage {
            height: first.height,
            width: first.width,
            data: acc.into_iter().map(|a| (a / n) as f32).collect(),
        })
    }

    /// 8-bit quantization, `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Reads an 8-bit grayscale PGM or PNG; value v maps to v/255.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    GrayImage::from_u8(luma.height() as usize, luma.width() as usize, luma.as_raw())
}

/// Writes a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.to_u8());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let img = GrayImage::from_fn(3, 5, |r, c| (r * 5 + c) as f32 / 15.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 0), img.get(1, 4));
    }

    #[test]
    fn pgm_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::from_fn(4, 6, |r, c| ((r * 6 + c) * 10) as f32 / 255.0);
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        let back = read_gray(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
    }

    #[test]
    fn mean_of_equal_images() {
        let a = GrayImage::filled(2, 2, 0.25);
        let m = GrayImage::mean_of(&[&a, &a, &a]).unwrap();
        assert_eq!(m, a);
        assert!(GrayImage::mean_of(&[]).is_err());
    }
}
