//! Pixel rendering for reports: detection overlays on images and
//! precision-recall curve plots. Everything draws into plain
//! [`ImagePlane`]s so the artifacts go through the same PNG writer as the
//! datasets and stay free of plotting dependencies.

use ndarray::Array3;

use crate::core::{Detection, ImagePlane};

/// Outline colors cycled by category id.
pub const CLASS_PALETTE: [[f64; 3]; 6] = [
    [1.00, 0.30, 0.10], // orange-red
    [0.10, 1.00, 0.30], // green
    [0.25, 0.55, 1.00], // azure
    [1.00, 0.90, 0.10], // yellow
    [1.00, 0.25, 0.95], // magenta
    [0.10, 0.95, 0.95], // cyan
];

fn put(data: &mut Array3<f64>, x: i64, y: i64, color: [f64; 3]) {
    let (_, h, w) = data.dim();
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = color[c];
        }
    }
}

/// Copy the image and draw each detection as a two-pixel class-colored
/// box outline. Boxes are clamped to the frame; scores do not change the
/// rendering, so equal inputs always produce equal pixels.
pub fn draw_detections(img: &ImagePlane, dets: &[Detection]) -> ImagePlane {
    let mut data = img.pixels().clone();
    for d in dets {
        let color = CLASS_PALETTE[d.category_id % CLASS_PALETTE.len()];
        let x1 = d.bbox.x1.round() as i64;
        let y1 = d.bbox.y1.round() as i64;
        let x2 = d.bbox.x2.round() as i64;
        let y2 = d.bbox.y2.round() as i64;
        for t in 0..2i64 {
            for x in x1..=x2 {
                put(&mut data, x, y1 + t, color);
                put(&mut data, x, y2 - t, color);
            }
            for y in y1..=y2 {
                put(&mut data, x1 + t, y, color);
                put(&mut data, x2 - t, y, color);
            }
        }
    }
    ImagePlane::new(data).expect("overlay preserves image shape and value range")
}

const PLOT_BG: [f64; 3] = [1.0, 1.0, 1.0];
const PLOT_AXIS: [f64; 3] = [0.25, 0.25, 0.25];
const PLOT_GRID: [f64; 3] = [0.88, 0.88, 0.88];
const PLOT_LINE: [f64; 3] = [0.15, 0.30, 0.85];

/// Plot a precision-recall curve (recall on x, precision on y, both axes
/// spanning [0, 1]) as a square image of side `size` (>= 64). The curve is
/// drawn from recall 0 through the given points in order; an empty point
/// list yields just the axes and grid.
pub fn render_pr_curve(points: &[(f64, f64)], size: usize) -> ImagePlane {
    let size = size.max(64);
    let mut data = Array3::from_shape_fn((3, size, size), |(c, _, _)| PLOT_BG[c]);
    let margin = size / 8;
    let lo = margin as i64; // left/top edge of the plot area
    let hi = (size - 1 - margin) as i64; // right/bottom edge
    let span = (hi - lo) as f64;

    let px = |recall: f64| lo + (recall.clamp(0.0, 1.0) * span).round() as i64;
    let py = |precision: f64| hi - (precision.clamp(0.0, 1.0) * span).round() as i64;

    for frac in [0.25, 0.5, 0.75, 1.0] {
        let gx = px(frac);
        let gy = py(frac);
        for t in lo..=hi {
            put(&mut data, gx, t, PLOT_GRID);
            put(&mut data, t, gy, PLOT_GRID);
        }
    }
    for t in lo..=hi {
        put(&mut data, lo, t, PLOT_AXIS); // y axis
        put(&mut data, t, hi, PLOT_AXIS); // x axis
    }

    if !points.is_empty() {
        let mut path = Vec::with_capacity(points.len() + 1);
        path.push((0.0, points[0].1));
        path.extend_from_slice(points);
        for pair in path.windows(2) {
            let (x0, y0) = (px(pair[0].0), py(pair[0].1));
            let (x1, y1) = (px(pair[1].0), py(pair[1].1));
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let x = x0 + ((x1 - x0) as f64 * f).round() as i64;
                let y = y0 + ((y1 - y0) as f64 * f).round() as i64;
                put(&mut data, x, y, PLOT_LINE);
                put(&mut data, x, y - 1, PLOT_LINE); // 2px stroke
            }
        }
    }
    ImagePlane::new(data).expect("plot pixels stay in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::BBox;

    fn gray(h: usize, w: usize) -> ImagePlane {
        ImagePlane::constant(h, w, 0.5).unwrap()
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            category_id: class,
            score: 0.9,
        }
    }

    #[test]
    fn overlay_paints_border_and_leaves_interior() {
        let img = gray(40, 40);
        let out = draw_detections(&img, &[det(8.0, 10.0, 28.0, 30.0, 2)]);
        let px = out.pixels();
        let color = CLASS_PALETTE[2];
        for c in 0..3 {
            assert_eq!(px[[c, 10, 18]], color[c], "top edge painted");
            assert_eq!(px[[c, 20, 8]], color[c], "left edge painted");
            assert_eq!(px[[c, 20, 20]], 0.5, "interior untouched");
            assert_eq!(px[[c, 2, 2]], 0.5, "outside untouched");
        }
        assert_eq!(out.height(), 40);
        assert_eq!(out.width(), 40);
    }

    #[test]
    fn overlay_clamps_out_of_frame_boxes() {
        let img = gray(40, 40);
        // box poking past every edge must not panic or change the size
        let out = draw_detections(&img, &[det(-5.0, -5.0, 60.0, 60.0, 0)]);
        assert_eq!(out.height(), 40);
        assert_eq!(out.width(), 40);
    }

    #[test]
    fn pr_plot_has_axes_grid_and_curve() {
        let points = vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)];
        let img = render_pr_curve(&points, 128);
        assert_eq!((img.height(), img.width()), (128, 128));
        let px = img.pixels();
        assert_eq!(px[[0, 0, 0]], 1.0, "background is white");
        // axis pixel: bottom-left corner of the plot area
        let margin = 128 / 8;
        assert_eq!(px[[0, 127 - margin, margin]], PLOT_AXIS[0]);
        let blue = px
            .indexed_iter()
            .filter(|((c, _, _), v)| *c == 2 && **v == PLOT_LINE[2])
            .count();
        assert!(blue > 50, "curve stroke present, got {blue} blue pixels");
        assert_eq!(img, render_pr_curve(&points, 128), "rendering is deterministic");
    }

    #[test]
    fn pr_plot_handles_empty_curve() {
        let img = render_pr_curve(&[], 64);
        assert_eq!((img.height(), img.width()), (64, 64));
    }
}
