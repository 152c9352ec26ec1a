//! Spatial-domain images and their on-disk formats.

use crate::error::{CoreError, Result};
use std::io::{Read, Write};
use std::path::Path;

/// A dense `height x width` intensity grid, row-major. Nominal range is `[0, 1]` for
/// dataset images; intermediate diffusion states may take any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(CoreError::dim(format!(
                "pixel count {} does not match {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// Pixel-wise clamp, used before forward projection to keep sinograms nonnegative.
    pub fn clamped(&self, lo: f32, hi: f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean squared difference against another image of the same shape.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(CoreError::dim("mse over mismatched image shapes".to_string()));
        }
        Ok(mean_sq_diff(&self.pixels, &other.pixels))
    }
}

/// Mean of squared element differences, accumulated in f64.
pub fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

const RAW_MAGIC: &[u8; 4] = b"TOMO";
const KIND_IMAGE: u32 = 0;
const KIND_SINOGRAM: u32 = 1;

/// Write the raw float format: 16-byte header (magic "TOMO", width, height, kind) followed
/// by little-endian f32 samples. Sinograms store `width = num_detectors`,
/// `height = num_angles`.
pub fn write_raw(path: &Path, width: usize, height: usize, kind_sinogram: bool, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(CoreError::dim("raw dump size mismatch".to_string()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(RAW_MAGIC)?;
    f.write_all(&(width as u32).to_le_bytes())?;
    f.write_all(&(height as u32).to_le_bytes())?;
    let kind = if kind_sinogram { KIND_SINOGRAM } else { KIND_IMAGE };
    f.write_all(&kind.to_le_bytes())?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read the raw float format written by [`write_raw`]. Returns (width, height, kind_sinogram, data).
pub fn read_raw(path: &Path) -> Result<(usize, usize, bool, Vec<f32>)> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| CoreError::Checkpoint(format!("{}: truncated raw header", path.display())))?;
    if &header[0..4] != RAW_MAGIC {
        return Err(CoreError::Checkpoint(format!("{}: bad raw magic", path.display())));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let kind = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != width * height * 4 {
        return Err(CoreError::Checkpoint(format!(
            "{}: raw payload {} bytes, expected {}",
            path.display(),
            bytes.len(),
            width * height * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, kind == KIND_SINOGRAM, data))
}

pub fn write_image_raw(path: &Path, image: &Image) -> Result<()> {
    write_raw(path, image.width, image.height, false, &image.pixels)
}

pub fn read_image_raw(path: &Path) -> Result<Image> {
    let (width, height, is_sino, data) = read_raw(path)?;
    if is_sino {
        return Err(CoreError::Checkpoint(format!("{}: expected image, found sinogram", path.display())));
    }
    Image::from_pixels(width, height, data)
}

/// 8-bit binary PGM dump; values are clamped to `[0, 1]` and quantized.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}
