//! Image loading and writing for the spectral pipeline.
//!
//! Inputs are 8-bit PGM (P5) or PNG, grayscale or RGB. Color is reduced to
//! luminance with weights (0.299, 0.587, 0.114); images are then
//! center-cropped to a square and resized to a common side with
//! nearest-neighbor sampling, so no interpolation touches the spectrum.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::grid_spectra::ImageGrid;

/// Default side after crop and resize.
pub const DEFAULT_SIDE: usize = 256;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn to_grid(img: DynamicImage) -> Result<ImageGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (LUMA[0] * f64::from(r) + LUMA[1] * f64::from(g) + LUMA[2] * f64::from(b)) / 255.0
            })
            .collect()
    } else {
        img.to_luma8().pixels().map(|p| f64::from(p.0[0]) / 255.0).collect()
    };
    ImageGrid::new(w, h, values)
}

/// Decodes a PGM or PNG file into an unscaled grid in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    to_grid(img)
}

/// Center crop to the largest square, then nearest-neighbor resize.
pub fn crop_and_resize(img: &ImageGrid, side: usize) -> Result<ImageGrid> {
    if side == 0 {
        return Err(Error::invalid("target side must be positive"));
    }
    let s = img.width().min(img.height());
    let r0 = (img.height() - s) / 2;
    let c0 = (img.width() - s) / 2;
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        let sr = r0 + r * s / side;
        for c in 0..side {
            values.push(img.get(sr, c0 + c * s / side));
        }
    }
    ImageGrid::new(side, side, values)
}

/// Loads and preprocesses an image to `side x side`.
pub fn load_preprocessed(path: &Path, side: usize) -> Result<ImageGrid> {
    crop_and_resize(&load_image(path)?, side)
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "png")
    )
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::invalid(format!("no PGM/PNG images in {}", dir.display())));
    }
    Ok(out)
}

/// Loads every image in a directory, preprocessed to a common side.
pub fn load_dir(dir: &Path, side: usize) -> Result<Vec<ImageGrid>> {
    list_images(dir)?
        .iter()
        .map(|p| load_preprocessed(p, side))
        .collect()
}

/// Encodes values in `[0, 1]` as a binary PGM.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Encodes arbitrary values as a PGM after min-max normalization. A
/// constant map renders as all black.
pub fn encode_pgm_normalized(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    encode_pgm(width, height, &scaled)
}

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img.width(), img.height(), img.values()))?;
    Ok(())
}
