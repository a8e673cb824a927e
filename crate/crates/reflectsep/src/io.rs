//! 8-bit PNG/JPEG decoding and encoding, and directory scans.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use reflectsep_core::imaging::Image;

use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::EmptyDir {
            path: dir.to_path_buf(),
        });
    }
    Ok(files)
}

/// Decodes to three channels with intensities `v / 255`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 255.0)
        .collect();
    Ok(Image::new(h as usize, w as usize, 3, data)?)
}

pub fn load_dir(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Image>)> {
    let files = list_images(dir)?;
    let images = files.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    Ok((files, images))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB raster; single-channel images are replicated to gray.
pub fn to_rgb8(img: &Image) -> RgbImage {
    let rgb = img.to_rgb();
    let raw = rgb.data().iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size")
}

/// Inverse of [`load_image`] up to rounding to the nearest 8-bit level.
pub fn quantized(img: &Image) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| f64::from(quantize(v)) / 255.0)
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data).expect("finite")
}

pub fn save_rgb(raster: &RgbImage, path: &Path) -> Result<()> {
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => ImageFormat::Jpeg,
        _ => ImageFormat::Png,
    };
    raster
        .save_with_format(path, format)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Encodes as PNG, or JPEG for `.jpg`/`.jpeg` paths.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    save_rgb(&to_rgb8(img), path)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
