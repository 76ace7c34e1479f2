//! RGB images (PNG or PPM, picked by extension), grayscale previews and the
//! raw depth format.
//!
//! Depth files: 8-byte magic `SGDEPTH1`, then height and width as
//! little-endian `u32`, then `H·W` little-endian `f32` values row by row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

const DEPTH_MAGIC: &[u8; 8] = b"SGDEPTH1";

/// Decoded image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<f64>,
    /// Alpha channel, when the file has one.
    pub alpha: Option<Vec<f64>>,
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::format(path, "unsupported image extension (expected .png or .ppm)")),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Rounds to the nearest 16-bit level, as stored by [`save_rgb16`].
pub fn quantize16(v: f64) -> f64 {
    to_u16(v) as f64 / 65535.0
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    let fmt = format_for(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, fmt).map_err(img_err(path))
}

/// Saves interleaved RGB in `[0, 1]` as 8 bits per channel.
pub fn save_rgb(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "save_rgb: {} values for a {width}x{height} image",
            rgb.len()
        )));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, rgb.iter().map(|&v| to_u8(v)).collect())
            .ok_or_else(|| Error::invalid("save_rgb: buffer size"))?;
    save(DynamicImage::ImageRgb8(buf), path)
}

/// Saves interleaved RGB with 16 bits per channel (PNG only).
pub fn save_rgb16(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "save_rgb16: {} values for a {width}x{height} image",
            rgb.len()
        )));
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, rgb.iter().map(|&v| to_u16(v)).collect())
            .ok_or_else(|| Error::invalid("save_rgb16: buffer size"))?;
    save(DynamicImage::ImageRgb16(buf), path)
}

/// Saves a single channel in `[0, 1]` as 8-bit grayscale.
pub fn save_gray(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid("save_gray: size mismatch"));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, values.iter().map(|&v| to_u8(v)).collect())
            .ok_or_else(|| Error::invalid("save_gray: buffer size"))?;
    save(DynamicImage::ImageLuma8(buf), path)
}

/// Loads an 8- or 16-bit image; gray images are expanded to RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    load_rgb_scaled(path, 1)
}

/// Like [`load_rgb`], shrinking both sides by an integer `factor`.
pub fn load_rgb_scaled(path: &Path, factor: usize) -> Result<RgbImage> {
    let fmt = format_for(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut img = image::load(BufReader::new(file), fmt).map_err(img_err(path))?;
    if factor > 1 {
        let (w, h) = (img.width() / factor as u32, img.height() / factor as u32);
        if w == 0 || h == 0 {
            return Err(Error::format(path, format!("downscale factor {factor} leaves an empty image")));
        }
        img = img.resize_exact(w, h, image::imageops::FilterType::Triangle);
    }
    let (width, height) = (img.width() as usize, img.height() as usize);
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba16();
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut alpha = Vec::with_capacity(if has_alpha { width * height } else { 0 });
    for p in rgba.pixels() {
        for k in 0..3 {
            rgb.push(p.0[k] as f64 / 65535.0);
        }
        if has_alpha {
            alpha.push(p.0[3] as f64 / 65535.0);
        }
    }
    Ok(RgbImage {
        width,
        height,
        rgb,
        alpha: has_alpha.then_some(alpha),
    })
}

/// Loads a single-channel image (the first channel of color images).
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = load_rgb(path)?;
    Ok((img.width, img.height, img.rgb.chunks(3).map(|c| c[0]).collect()))
}

pub fn write_depth(path: &Path, depth: &[f64], width: usize, height: usize) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::invalid("write_depth: size mismatch"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut buf = Vec::with_capacity(16 + depth.len() * 4);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for &d in depth {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, values)`.
pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != DEPTH_MAGIC {
        return Err(Error::format(path, "not a depth file (bad magic)"));
    }
    let h = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + 4 * w * h {
        return Err(Error::format(
            path,
            format!("expected {} bytes of depth for {w}x{h}, found {}", 4 * w * h, buf.len() - 16),
        ));
    }
    let vals = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((w, h, vals))
}

/// Grayscale preview: near is bright, far is dark, invalid pixels black.
pub fn depth_preview(depth: &[f64], valid: &[bool]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (d, _) in depth.iter().zip(valid).filter(|(_, v)| **v) {
        lo = lo.min(*d);
        hi = hi.max(*d);
    }
    let span = (hi - lo).max(1e-12);
    depth
        .iter()
        .zip(valid)
        .map(|(d, v)| if *v { 1.0 - 0.8 * (d - lo) / span } else { 0.0 })
        .collect()
}
