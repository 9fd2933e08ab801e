//! Minimal static PR-curve rendering: a fixed [0,1]^2 frame with 0.1 grid
//! lines and one polyline per series, written as PNG. No text, no
//! interactivity; series identity is carried by color and file name.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const SIZE: u32 = 600;
const MARGIN: u32 = 40;

/// Fixed palette keyed by series order: r, i, n, d, generic.
pub const SERIES_COLORS: [[u8; 3]; 5] = [
    [204, 51, 51],
    [230, 159, 0],
    [0, 128, 64],
    [41, 98, 198],
    [90, 90, 90],
];

fn to_px(v: f64, axis_len: u32) -> f64 {
    v.clamp(0.0, 1.0) * (axis_len - 1) as f64
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, color);
        }
    }
}

/// Render recall (x) vs precision (y) polylines into `path`.
pub fn render_pr_plot(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Data(format!(
            "{}: nothing to plot (all series empty)",
            path.display()
        )));
    }
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let plot = SIZE - 2 * MARGIN;

    // grid every 0.1, heavier frame
    for k in 0..=10u32 {
        let offset = MARGIN + k * (plot - 1) / 10;
        let shade = if k == 0 || k == 10 { 60 } else { 215 };
        for t in MARGIN..MARGIN + plot {
            img.put_pixel(t, offset, Rgb([shade, shade, shade]));
            img.put_pixel(offset, t, Rgb([shade, shade, shade]));
        }
    }

    for (si, (_, pts)) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        for w in pts.windows(2) {
            let (r0, p0) = w[0];
            let (r1, p1) = w[1];
            let x0 = MARGIN as f64 + to_px(r0, plot);
            let y0 = (MARGIN + plot - 1) as f64 - to_px(p0, plot);
            let x1 = MARGIN as f64 + to_px(r1, plot);
            let y1 = (MARGIN + plot - 1) as f64 - to_px(p1, plot);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        if pts.len() == 1 {
            let (r, p) = pts[0];
            let x = MARGIN as f64 + to_px(r, plot);
            let y = (MARGIN + plot - 1) as f64 - to_px(p, plot);
            draw_line(&mut img, x - 2.0, y, x + 2.0, y, color);
            draw_line(&mut img, x, y - 2.0, x, y + 2.0, color);
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}
