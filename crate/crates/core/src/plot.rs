//! Grouped bar charts of report aggregates, drawn straight into a PNG.
//!
//! There is no text rendering: groups are the metrics (dice, precision,
//! recall, BCE scaled to `[0,1]` by the largest value) in that order and bars
//! within a group follow the report order, one palette colour per method.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{invalid, CaclError, Result};
use crate::io::atomic_write;
use crate::metrics::MetricsReport;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Bar heights in `[0,1]`, indexed `[metric][method]`.
pub fn bar_values(reports: &[MetricsReport]) -> [Vec<f64>; 4] {
    let max_bce = reports.iter().map(|r| r.aggregate.bce).fold(0.0, f64::max);
    let bce_scale = if max_bce > 0.0 { max_bce } else { 1.0 };
    [
        reports.iter().map(|r| r.aggregate.dice).collect(),
        reports.iter().map(|r| r.aggregate.precision).collect(),
        reports.iter().map(|r| r.aggregate.recall).collect(),
        reports.iter().map(|r| r.aggregate.bce / bce_scale).collect(),
    ]
}

pub fn render_bar_chart(reports: &[MetricsReport], width: u32, height: u32) -> Result<RgbImage> {
    if reports.is_empty() {
        return Err(invalid("nothing to plot"));
    }
    if width < 64 || height < 64 {
        return Err(invalid("plot must be at least 64x64"));
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 16u32;
    let plot_h = height - 2 * margin;
    let base_y = height - margin;
    let values = bar_values(reports);
    let group_w = (width - 2 * margin) / 4;
    let bar_w = ((group_w * 3 / 4) / reports.len() as u32).max(1);
    for (g, vals) in values.iter().enumerate() {
        let x0 = margin + g as u32 * group_w + group_w / 8;
        for (m, &v) in vals.iter().enumerate() {
            let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
            let colour = Rgb(PALETTE[m % PALETTE.len()]);
            for x in x0 + m as u32 * bar_w..x0 + (m as u32 + 1) * bar_w {
                for y in base_y - h..base_y {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, base_y, Rgb([0, 0, 0]));
    }
    Ok(img)
}

pub fn save_bar_chart(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let img = render_bar_chart(reports, 480, 320)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| CaclError::Image { path: PathBuf::from(path), source })?;
    atomic_write(path, &buf.into_inner())
}
