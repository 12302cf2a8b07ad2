//! PNG encoding of float images.
//!
//! Color images are 8-bit; values in `[0, 1]` map to bytes by `round(255 v)`
//! (half away from zero) and back by `v / 255`. Linear-valued maps (depth and
//! the decomposition layers) are 16-bit with a per-file maximum stored in a
//! sidecar text file next to the PNG, so that `value = code / 65535 · max`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::image::Image;

fn encode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Encode { path: path.to_path_buf(), reason: reason.to_string() }
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG. Without `clamp`, values
/// outside `[0, 1]` are an error.
pub fn write_image(path: &Path, img: &Image, clamp: bool) -> Result<()> {
    if !clamp {
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(encode_err(path, format!("value {v} outside [0, 1]")));
        }
    }
    let bytes: Vec<u8> = img.data.iter().map(|v| to_byte(*v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.channels {
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer size")),
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer size")),
        c => return Err(encode_err(path, format!("unsupported channel count {c}"))),
    };
    dynamic.save_with_format(path, image::ImageFormat::Png).map_err(|e| encode_err(path, e))
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    image::open(path).map_err(|e| decode_err(path, e))
}

/// Reads an 8-bit RGB PNG into `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    match open(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            Ok(Image { width: w as usize, height: h as usize, channels: 3, data })
        }
        other => Err(decode_err(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

/// Path of the sidecar holding the per-file maximum.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("max.txt")
}

/// Writes a nonnegative 1- or 3-channel map as 16-bit PNG plus sidecar; returns the scale.
pub fn write_linear16(path: &Path, img: &Image) -> Result<f64> {
    if let Some(v) = img.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(encode_err(path, format!("value {v} is not a finite nonnegative number")));
    }
    let max = img.max_value();
    let scale = if max > 0.0 { max } else { 1.0 };
    let codes: Vec<u16> = img.data.iter().map(|v| (v / scale * 65535.0).round() as u16).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.channels {
        1 => DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, codes).expect("buffer size")),
        3 => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, codes).expect("buffer size")),
        c => return Err(encode_err(path, format!("unsupported channel count {c}"))),
    };
    dynamic.save_with_format(path, image::ImageFormat::Png).map_err(|e| encode_err(path, e))?;
    fs::write(sidecar_path(path), format!("{scale:e}\n"))?;
    Ok(scale)
}

pub fn read_linear16(path: &Path) -> Result<Image> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| decode_err(&side, e))?;
    let scale: f64 = text.trim().parse().map_err(|e| decode_err(&side, e))?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(decode_err(&side, format!("invalid scale {scale}")));
    }
    let (w, h, channels, codes) = match open(path)? {
        DynamicImage::ImageLuma16(buf) => (buf.width(), buf.height(), 1, buf.into_raw()),
        DynamicImage::ImageRgb16(buf) => (buf.width(), buf.height(), 3, buf.into_raw()),
        other => return Err(decode_err(path, format!("expected 16-bit gray or RGB, found {:?}", other.color()))),
    };
    let data = codes.into_iter().map(|c| c as f64 / 65535.0 * scale).collect();
    Ok(Image { width: w as usize, height: h as usize, channels, data })
}

/// 16-bit depth map (single channel).
pub fn write_depth(path: &Path, depth: &Image) -> Result<f64> {
    if depth.channels != 1 {
        return Err(encode_err(path, "depth must have one channel"));
    }
    write_linear16(path, depth)
}

pub fn read_depth(path: &Path) -> Result<Image> {
    let d = read_linear16(path)?;
    if d.channels != 1 {
        return Err(decode_err(path, "depth must have one channel"));
    }
    Ok(d)
}
