//! PNG rendering for CLI artifacts: binary masks, heatmap overlays, and the
//! ablation bar chart.

use std::path::Path;

use avsep::metrics::bilinear_upsample;
use avsep::Result;
use ndarray::{Array2, Array3};

/// Binary mask as a grayscale PNG (white = keep).
pub fn write_mask_png(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &m) in mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([if m >= 0.5 { 255 } else { 0 }]));
    }
    img.save(path).map_err(avsep::AvsepError::from)?;
    Ok(())
}

/// Heatmap bilinearly upsampled to the image size and alpha-blended in red
/// over the conditioning image.
pub fn write_heatmap_overlay(path: &Path, base: &Array3<f64>, heatmap: &Array2<f64>) -> Result<()> {
    let (_, h, w) = base.dim();
    let up = bilinear_upsample(heatmap, h, w);
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let heat = (up[(y, x)] - lo) / span;
            let px = |c: usize| (base[(c, y, x)].clamp(0.0, 1.0) * 255.0) as f64;
            let r = (0.5 * px(0) + 0.5 * heat * 255.0).round().clamp(0.0, 255.0) as u8;
            let g = (0.5 * px(1)).round() as u8;
            let b = (0.5 * px(2)).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([r, g, b]));
        }
    }
    img.save(path).map_err(avsep::AvsepError::from)?;
    Ok(())
}

/// Minimal bar chart: one colored bar per (label, value), zero line, values
/// mapped linearly; labels and numbers live in the accompanying table/JSON.
pub fn write_bar_chart(path: &Path, bars: &[(String, f64)]) -> Result<()> {
    let (width, height) = (80 * bars.len().max(1) as u32 + 40, 300u32);
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let max = bars.iter().map(|(_, v)| v.abs()).fold(1e-9, f64::max);
    let colors = [
        image::Rgb([66, 133, 244]),
        image::Rgb([219, 68, 55]),
        image::Rgb([244, 180, 0]),
        image::Rgb([15, 157, 88]),
    ];
    let zero_y = (height / 2) as i64;
    for x in 0..width {
        img.put_pixel(x, zero_y as u32, image::Rgb([0, 0, 0]));
    }
    for (i, (_, v)) in bars.iter().enumerate() {
        let color = colors[i % colors.len()];
        let x0 = 30 + i as u32 * 80;
        let bar_h = ((v / max) * 120.0).round() as i64;
        let (top, bottom) = if bar_h >= 0 {
            (zero_y - bar_h, zero_y)
        } else {
            (zero_y, zero_y - bar_h)
        };
        for y in top.max(0)..=bottom.min(height as i64 - 1) {
            for x in x0..(x0 + 50).min(width - 1) {
                img.put_pixel(x, y as u32, color);
            }
        }
    }
    img.save(path).map_err(avsep::AvsepError::from)?;
    Ok(())
}
