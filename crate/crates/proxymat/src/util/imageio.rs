//! Image I/O helpers.
//!
//! Generator masks are stored as 16-bit grayscale PNG so quantization stays
//! far below any L1 fidelity threshold; renders and material maps go out as
//! 8-bit PNG for viewing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Quantize [0,1] to u16 with round-to-nearest.
#[inline]
pub fn quantize_u16(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Save a single-channel [0,1] image as 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf: Vec<u16> = Vec::with_capacity(h * w);
    for row in img.rows() {
        for &v in row {
            buf.push(quantize_u16(v));
        }
    }
    let ib: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    DynamicImage::ImageLuma16(ib).save(path)?;
    Ok(())
}

/// Load a 16-bit grayscale PNG into a [0,1] array.
pub fn load_gray16(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        arr[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
    }
    Ok(arr)
}

/// Hash of the quantized pixel stream (u16 little-endian, row-major).
/// This is the per-record checksum stored in dataset manifests.
pub fn gray16_pixel_hash(img: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(img.len() * 2);
    for row in img.rows() {
        for &v in row {
            bytes.extend_from_slice(&quantize_u16(v).to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Save a [3,H,W] color image in [0,1] as 8-bit RGB PNG.
pub fn save_rgb8(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push((img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let ib: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    ib.save(path)?;
    Ok(())
}

/// Save a single-channel [0,1] image as 8-bit grayscale PNG.
pub fn save_gray8(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = Vec::with_capacity(h * w);
    for row in img.rows() {
        for &v in row {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let ib: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    ib.save(path)?;
    Ok(())
}

/// Load any PNG as an RGB [3,H,W] image in [0,1].
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            arr[[ch, y as usize, x as usize]] = (p.0[ch] as f64).clamp(0.0, 1.0);
        }
    }
    Ok(arr)
}
