//! Minimal PNG renderers: ROC curves, confusion-matrix heat grids, saliency
//! overlays, and dynamic-window overlays. Schematic output (no text), drawn
//! directly with pixel primitives.

use crate::error::{Error, Result};
use crate::evaluation::metrics::MetricsReport;
use crate::evaluation::SaliencyMap;
use crate::dwm::WindowSelection;
use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;

// sparse anchors of a perceptually uniform colormap, interpolated linearly
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 74, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [109, 205, 89],
    [253, 231, 37],
];

pub fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let lo = v.floor() as usize;
    let hi = (lo + 1).min(VIRIDIS.len() - 1);
    let f = v - lo as f64;
    let mix = |a: u8, b: u8| (a as f64 * (1.0 - f) + b as f64 * f).round() as u8;
    Rgb([
        mix(VIRIDIS[lo][0], VIRIDIS[hi][0]),
        mix(VIRIDIS[lo][1], VIRIDIS[hi][1]),
        mix(VIRIDIS[lo][2], VIRIDIS[hi][2]),
    ])
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

const CLASS_COLORS: [Rgb<u8>; 3] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
];

/// One ROC polyline per class (undefined classes skipped), plus the chance
/// diagonal.
pub fn render_roc(report: &MetricsReport, path: &Path) -> Result<()> {
    let size = 512u32;
    let margin = 32i64;
    let span = (size as i64 - 2 * margin) as f64;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let to_px = |fpr: f64, tpr: f64| -> (i64, i64) {
        (
            margin + (fpr * span).round() as i64,
            size as i64 - margin - (tpr * span).round() as i64,
        )
    };
    let axis = Rgb([120, 120, 120]);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    draw_line(&mut img, to_px(0.0, 1.0), to_px(1.0, 1.0), axis);
    draw_line(&mut img, to_px(1.0, 0.0), to_px(1.0, 1.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    for (k, cm) in report.per_class.iter().enumerate() {
        let color = CLASS_COLORS[k % CLASS_COLORS.len()];
        for w in cm.roc.windows(2) {
            draw_line(&mut img, to_px(w[0].fpr, w[0].tpr), to_px(w[1].fpr, w[1].tpr), color);
        }
        // legend swatch
        for dy in 0..8u32 {
            for dx in 0..8u32 {
                img.put_pixel(8 + dx + 12 * k as u32, 8 + dy, color);
            }
        }
    }
    save(&img, path)
}

/// Row-normalized confusion matrix as a colored grid.
pub fn render_confusion(report: &MetricsReport, path: &Path) -> Result<()> {
    let k = report.confusion_normalized.len();
    let cell = 96u32;
    let size = cell * k as u32 + 2;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    for (i, row) in report.confusion_normalized.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let color = colormap(v);
            for dy in 0..cell - 2 {
                for dx in 0..cell - 2 {
                    img.put_pixel(j as u32 * cell + dx + 2, i as u32 * cell + dy + 2, color);
                }
            }
        }
    }
    save(&img, path)
}

/// Input blended with the colormapped heatmap at fixed alpha 0.5.
pub fn render_saliency_overlay(
    base: &RgbImage,
    saliency: &SaliencyMap,
    path: &Path,
) -> Result<()> {
    let (h, w) = saliency.heatmap.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let heat = colormap(saliency.heatmap[(y, x)]);
            let src = base.get_pixel(x as u32, y as u32);
            let blend = |a: u8, b: u8| ((a as f64 * 0.5) + (b as f64 * 0.5)).round() as u8;
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    blend(src[0], heat[0]),
                    blend(src[1], heat[1]),
                    blend(src[2], heat[2]),
                ]),
            );
        }
    }
    save(&img, path)
}

/// Selected dynamic windows drawn as green rectangles.
pub fn render_dwm_overlay(
    base: &RgbImage,
    selections: &[WindowSelection],
    path: &Path,
) -> Result<()> {
    let mut img = base.clone();
    let green = Rgb([0, 230, 60]);
    for sel in selections {
        let (r0, c0, h, w) = sel.crop_rect;
        let (r1, c1) = ((r0 + h) as i64 - 1, (c0 + w) as i64 - 1);
        draw_line(&mut img, (c0 as i64, r0 as i64), (c1, r0 as i64), green);
        draw_line(&mut img, (c0 as i64, r1), (c1, r1), green);
        draw_line(&mut img, (c0 as i64, r0 as i64), (c0 as i64, r1), green);
        draw_line(&mut img, (c1, r0 as i64), (c1, r1), green);
    }
    save(&img, path)
}

/// Saliency heatmap values as a standalone colormapped PNG.
pub fn render_heatmap(heatmap: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = heatmap.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, colormap(heatmap[(y, x)]));
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::compute_metrics;
    use crate::model::HeadMode;

    #[test]
    fn renders_roc_and_confusion_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![0usize, 1, 1, 0, 1];
        let mut probs = Array2::<f64>::zeros((5, 2));
        for (i, s) in [0.2, 0.8, 0.6, 0.4, 0.9].iter().enumerate() {
            probs[(i, 1)] = *s;
            probs[(i, 0)] = 1.0 - s;
        }
        let report = compute_metrics(&labels, &probs, HeadMode::Binary).unwrap();
        let roc = dir.path().join("roc.png");
        let conf = dir.path().join("confusion.png");
        render_roc(&report, &roc).unwrap();
        render_confusion(&report, &conf).unwrap();
        assert!(roc.exists() && conf.exists());
        let loaded = image::open(&roc).unwrap();
        assert_eq!(loaded.width(), 512);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
    }
}
