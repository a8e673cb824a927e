//! Qualitative panels: one PNG per pair with labeled tiles.

use std::path::{Path, PathBuf};

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};
use reflectsep_core::evaluation::EVAL_CHUNK;
use reflectsep_core::imaging::Image;
use reflectsep_core::networks::SeparatorModel;
use reflectsep_core::synthesis::TrainingPair;
use reflectsep_core::tensor::Tensor;

use crate::error::Result;
use crate::io::{create_dir, save_rgb, to_rgb8};

const GAP: u32 = 4;
const LABEL_HEIGHT: u32 = 12;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);

fn draw_text(canvas: &mut RgbImage, text: &str, x0: u32, y0: u32) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_LEGACY.get(ch as usize).copied().unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8u32 {
                let (x, y) = (x0 + 8 * i as u32 + col, y0 + row as u32);
                if bits >> col & 1 == 1 && x < canvas.width() && y < canvas.height() {
                    canvas.put_pixel(x, y, INK);
                }
            }
        }
    }
}

/// Lays `tiles` out left to right, each under its label.
pub fn compose(tiles: &[(&str, &Image)]) -> RgbImage {
    let side = tiles
        .iter()
        .map(|(_, t)| t.height().max(t.width()) as u32)
        .max()
        .unwrap_or(1);
    let width = GAP + tiles.len() as u32 * (side + GAP);
    let height = LABEL_HEIGHT + side + GAP;
    let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);
    for (i, (label, img)) in tiles.iter().enumerate() {
        let x0 = GAP + i as u32 * (side + GAP);
        draw_text(&mut canvas, label, x0, 2);
        let raster = to_rgb8(img);
        for (x, y, px) in raster.enumerate_pixels() {
            canvas.put_pixel(x0 + x, LABEL_HEIGHT + y, *px);
        }
    }
    canvas
}

fn images(t: &Option<Tensor>) -> Result<Option<Vec<Image>>> {
    Ok(match t {
        Some(t) => Some(t.to_images()?),
        None => None,
    })
}

/// Writes `panel_NNNNN.png` for every pair: input, estimates (with the mask
/// and masked products for the mask variant), then the ground truths.
pub fn dump_panels(
    model: &SeparatorModel,
    pairs: &[TrainingPair],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut files = Vec::with_capacity(pairs.len());
    for (c, chunk) in pairs.chunks(EVAL_CHUNK).enumerate() {
        let ys: Vec<Image> = chunk.iter().map(|p| p.y.clone()).collect();
        let sep = model.separate(&ys)?;
        let t_hat = sep.t_hat.to_images()?;
        let r_hat = sep.r_hat.to_images()?;
        let y_hat = images(&sep.y_hat)?;
        let mask = images(&sep.mask)?;
        let g_mt = images(&sep.g_mt)?;
        let g_mr = images(&sep.g_mr)?;
        for (j, pair) in chunk.iter().enumerate() {
            let mut tiles = vec![("y", &pair.y), ("t_hat", &t_hat[j]), ("r_hat", &r_hat[j])];
            if let Some(y_hat) = &y_hat {
                tiles.push(("y_hat", &y_hat[j]));
            }
            if let (Some(m), Some(gt), Some(gr)) = (&mask, &g_mt, &g_mr) {
                tiles.extend([("mask", &m[j]), ("G_mt", &gt[j]), ("G_mr", &gr[j])]);
            }
            tiles.extend([("t", &pair.t), ("r", &pair.r)]);
            let path = out_dir.join(format!("panel_{:05}.png", c * EVAL_CHUNK + j));
            save_rgb(&compose(&tiles), &path)?;
            files.push(path);
        }
    }
    Ok(files)
}
