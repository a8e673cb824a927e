//! Image container, geometric and augmentation primitives, convolution
//! kernels and quality metrics.
//!
//! Images are float rasters stored row-major in height × width × channels
//! order. Intensities are dimensionless; most producers keep them in `[0, 1]`.

mod metrics;

pub use metrics::{mse, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::rng::RandomState;

/// Side length every source image is resized to before cropping.
pub const PREPARED_SIZE: usize = 256;
/// Smallest and largest crop side sampled during augmentation.
pub const CROP_MIN: usize = 192;
pub const CROP_MAX: usize = 256;
/// Side length of training images.
pub const TRAIN_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Wraps `data` (row-major, channels interleaved). Channels must be 1 or 3
    /// and every element finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image dimensions must be nonzero"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(alloc::format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(shape_mismatch(height * width * channels, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_raw(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_raw(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sets one element. Non-finite values are rejected.
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                index: (y * self.width + x) * self.channels + c,
            });
        }
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = value;
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Self::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn zip_with(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.height, self.width, self.channels, data))
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Replicates a single-channel image into three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self::from_raw(self.height, self.width, 3, data)
    }

    /// Sub-rectangle starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(invalid(alloc::format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height,
                self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Ok(Self::from_raw(height, width, c, data))
    }
}

/// Dense 2-D convolution kernel anchored at its center element.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl Kernel {
    /// Both sides must be odd so the anchor is well defined.
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(invalid("kernel sides must be odd"));
        }
        if weights.len() != height * width {
            return Err(shape_mismatch(height * width, weights.len()));
        }
        if let Some(index) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Elementwise clamp into `[0, 1]`.
pub fn clip01(img: &Image) -> Result<Image> {
    if let Some(index) = img.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

/// Source coordinate for output index `i` under corner-aligned sampling:
/// the first and last output samples coincide with the first and last input
/// samples. A single output sample reads the input center.
#[inline]
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling (see [`corner_aligned`]).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let c = img.channels;
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let sx = corner_aligned(x, img.width, out_w);
            let x0 = libm::floor(sx) as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = corner_aligned(y, img.height, out_h);
        let y0 = libm::floor(sy) as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Image::from_raw(out_h, out_w, c, data))
}

/// Crop rectangle drawn by [`sample_crop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Crop height and width uniform in `[CROP_MIN, CROP_MAX]`, position uniform
/// over all placements inside a `PREPARED_SIZE` square.
pub fn sample_crop(rng: &mut RandomState) -> CropWindow {
    let height = rng.int_in(CROP_MIN as i64, CROP_MAX as i64) as usize;
    let width = rng.int_in(CROP_MIN as i64, CROP_MAX as i64) as usize;
    let top = rng.int_in(0, (PREPARED_SIZE - height) as i64) as usize;
    let left = rng.int_in(0, (PREPARED_SIZE - width) as i64) as usize;
    CropWindow {
        top,
        left,
        height,
        width,
    }
}

fn ensure_prepared(img: &Image) -> Result<()> {
    if img.height != PREPARED_SIZE || img.width != PREPARED_SIZE {
        return Err(shape_mismatch(
            (PREPARED_SIZE, PREPARED_SIZE),
            (img.height, img.width),
        ));
    }
    Ok(())
}

/// Crops `window` out of a 256×256 image and resizes the patch to `out`×`out`.
pub fn crop_resize(img: &Image, window: CropWindow, out: usize) -> Result<Image> {
    ensure_prepared(img)?;
    let patch = img.crop(window.top, window.left, window.height, window.width)?;
    resize_bilinear(&patch, out, out)
}

/// Random crop of a 256×256 image followed by a resize to 128×128.
pub fn random_crop_resize(img: &Image, rng: &mut RandomState) -> Result<Image> {
    ensure_prepared(img)?;
    let window = sample_crop(rng);
    crop_resize(img, window, TRAIN_SIZE)
}

/// Mirrors the column order.
pub fn mirror_columns(img: &Image) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let at = (y * img.width + x) * c;
            data.extend_from_slice(&img.data[at..at + c]);
        }
    }
    Image::from_raw(img.height, img.width, c, data)
}

/// Mirrors columns with probability one half.
pub fn flip_lr(img: &Image, rng: &mut RandomState) -> Image {
    if rng.coin(0.5) {
        mirror_columns(img)
    } else {
        img.clone()
    }
}

/// Side length used for a Gaussian blur kernel of standard deviation `sigma`.
pub fn gaussian_side(sigma: f64) -> usize {
    2 * libm::ceil(2.0 * sigma) as usize + 1
}

/// Isotropic Gaussian sampled at integer offsets on a square of side
/// `2·ceil(2σ)+1`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(alloc::format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let side = gaussian_side(sigma);
    let half = (side / 2) as i64;
    let denom = 2.0 * sigma * sigma;
    let mut weights = Vec::with_capacity(side * side);
    for dy in -half..=half {
        for dx in -half..=half {
            weights.push(libm::exp(-((dy * dy + dx * dx) as f64) / denom));
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Kernel::new(side, side, weights)
}

/// Reflect an out-of-range index back into `0..n` without repeating the
/// edge sample (`-1 → 1`, `n → n-2`).
#[inline]
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-channel 2-D convolution with "same" output size and reflect padding.
///
/// True convolution: a kernel entry at offset `(dy, dx)` from the anchor
/// moves image content by `(+dy, +dx)`.
pub fn conv2d_same(img: &Image, kernel: &Kernel) -> Result<Image> {
    if kernel.height > img.height || kernel.width > img.width {
        return Err(invalid(alloc::format!(
            "kernel {}x{} larger than image {}x{}",
            kernel.height,
            kernel.width,
            img.height,
            img.width
        )));
    }
    let (h, w, c) = img.shape();
    let cy = (kernel.height / 2) as i64;
    let cx = (kernel.width / 2) as i64;
    let mut out = vec![0.0; img.data.len()];
    // Sparse kernels (ghost pulses) only pay for their nonzero taps.
    for ky in 0..kernel.height {
        for kx in 0..kernel.width {
            let weight = kernel.at(ky, kx);
            if weight == 0.0 {
                continue;
            }
            let dy = ky as i64 - cy;
            let dx = kx as i64 - cx;
            let src_x: Vec<usize> = (0..w).map(|x| reflect_index(x as i64 - dx, w)).collect();
            for y in 0..h {
                let sy = reflect_index(y as i64 - dy, h);
                let src_row = &img.data[sy * w * c..(sy + 1) * w * c];
                let dst_row = &mut out[y * w * c..(y + 1) * w * c];
                for (x, &sx) in src_x.iter().enumerate() {
                    for ch in 0..c {
                        dst_row[x * c + ch] += weight * src_row[sx * c + ch];
                    }
                }
            }
        }
    }
    Ok(Image::from_raw(h, w, c, out))
}
