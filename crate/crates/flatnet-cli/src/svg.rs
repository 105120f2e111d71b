//! Hand-rolled SVG output: scatter groups, polylines, and heat maps.
//! No plotting dependencies; the figures are simple enough to emit directly.

use std::fmt::Write;

use flatnet_core::linalg::Matrix;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

pub struct ScatterGroup {
    /// Element id of the group (`data`, `features`, `interpolants`).
    pub id: &'static str,
    /// CSS color of the markers or stroke.
    pub color: &'static str,
    /// 2D points, one per column.
    pub points: Vec<(f64, f64)>,
    /// Render as a connected polyline instead of dots.
    pub polyline: bool,
}

fn bounds(groups: &[ScatterGroup]) -> (f64, f64, f64, f64) {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for g in groups {
        for &(x, y) in &g.points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = (max_x - min_x).max(1e-9) * 0.05;
    let pad_y = (max_y - min_y).max(1e-9) * 0.05;
    (min_x - pad_x, max_x + pad_x, min_y - pad_y, max_y + pad_y)
}

/// Equal-aspect scatter plot of several groups sharing one coordinate frame.
pub fn scatter(groups: &[ScatterGroup]) -> String {
    let (min_x, max_x, min_y, max_y) = bounds(groups);
    let span = (max_x - min_x).max(max_y - min_y);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN + (x - min_x) * scale;
        let py = SIZE - MARGIN - (y - min_y) * scale;
        (px, py)
    };

    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    )
    .unwrap();
    writeln!(out, "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>").unwrap();
    for g in groups {
        if g.polyline {
            write!(out, "<g id=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\">", g.id, g.color).unwrap();
            write!(out, "<polyline points=\"").unwrap();
            for &(x, y) in &g.points {
                let (px, py) = to_px(x, y);
                write!(out, "{px:.2},{py:.2} ").unwrap();
            }
            writeln!(out, "\"/></g>").unwrap();
        } else {
            write!(out, "<g id=\"{}\" fill=\"{}\">", g.id, g.color).unwrap();
            for &(x, y) in &g.points {
                let (px, py) = to_px(x, y);
                write!(out, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\"/>").unwrap();
            }
            writeln!(out, "</g>").unwrap();
        }
    }
    writeln!(out, "</svg>").unwrap();
    out
}

/// Grayscale heat map of a matrix with entries in [0, 1].
pub fn heatmap(values: &Matrix) -> String {
    let n_rows = values.nrows();
    let n_cols = values.ncols();
    let cell = SIZE / n_cols.max(n_rows) as f64;
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    )
    .unwrap();
    writeln!(out, "<g id=\"heatmap\" shape-rendering=\"crispEdges\">").unwrap();
    for i in 0..n_rows {
        for j in 0..n_cols {
            let v = values[(i, j)].clamp(0.0, 1.0);
            let level = (v * 255.0).round() as u8;
            write!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#{level:02x}{level:02x}{level:02x}\"/>",
                j as f64 * cell,
                i as f64 * cell,
                cell,
                cell
            )
            .unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "</g>").unwrap();
    writeln!(out, "</svg>").unwrap();
    out
}
