//! PNG / PGM ingestion and 8-bit output.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::density::DensityGrid;
use crate::error::{DenetError, Result};
use crate::tensor::Tensor;

/// Loads an 8-bit image as `[3, H, W]` in `[0, 1]`; gray images are
/// replicated across channels.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| DenetError::format(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        f64::from(raw[p * 3 + c]) / 255.0
    }))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an RGB PNG.
pub fn save_rgb(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(DenetError::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[w * h + p]), to_u8(d[2 * w * h + p])])
    });
    buf.save(path).map_err(|e| DenetError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes a density grid as 8-bit grayscale, scaled so the peak is white.
pub fn save_density_visual(grid: &DensityGrid, path: &Path) -> Result<()> {
    let peak = grid.values.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let buf: GrayImage =
        ImageBuffer::from_fn(grid.width as u32, grid.height as u32, |x, y| Luma([to_u8(grid.at(x as usize, y as usize) * scale)]));
    buf.save(path).map_err(|e| DenetError::Runtime(format!("{}: {e}", path.display())))
}
