//! Linear RGB images in `[0, 1]` and 8-bit PNG IO.

use std::path::Path;

use crate::{Error, Result};

/// Row-major RGB image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("image dimensions must be positive"));
        }
        let rgb = (0..width as usize * height as usize).flat_map(|_| color).collect();
        Ok(Self { width, height, rgb })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [f64; 3]) -> Result<Self> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        Ok(img)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Pixel by linear index.
    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 601 luma per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.rgb
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }

    pub fn clamp(&mut self) {
        self.rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb.len() != 3 * self.pixel_count() {
            return Err(Error::domain("image buffer size does not match dimensions"));
        }
        if self.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("image values outside [0, 1]"));
        }
        Ok(())
    }

    /// Mean absolute difference over all channels.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::domain("image dimensions differ"));
        }
        let s: f64 = self.rgb.iter().zip(&other.rgb).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.rgb.len() as f64)
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        out.rgb.iter_mut().for_each(|v| *v = quantize(*v) as f64 / 255.0);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.rgb.iter().map(|v| quantize(*v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ::image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width,
            self.height,
            ::image::ColorType::Rgb8,
            ::image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads any PNG, dropping alpha.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        Ok(Image {
            width: rgb.width(),
            height: rgb.height(),
            rgb: rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel 8-bit PNG helpers (used for shadow masks).
pub fn save_gray_png(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| quantize(*v)).collect();
    ::image::save_buffer_with_format(
        path,
        &bytes,
        width,
        height,
        ::image::ColorType::L8,
        ::image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_gray_png(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let img = ::image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma8();
    Ok((
        g.width(),
        g.height(),
        g.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.333]).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
        assert!(back.mean_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        assert!(Image::new(0, 4).is_err());
    }
}
