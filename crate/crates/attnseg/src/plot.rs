//! Minimal PNG line plots for training curves and sweeps. Text is rendered
//! with a built-in 5x7 bitmap font, so output is deterministic and needs no
//! font files.

use std::path::Path;

use ndarray::Array3;

use crate::data::save_image_png;
use crate::error::Result;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Rows of 5-bit glyph bitmaps; bit 4 is the leftmost pixel.
fn glyph(ch: char) -> [u8; GLYPH_H] {
    match ch.to_ascii_lowercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x11, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0F, 0x11, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        _ => [0; GLYPH_H],
    }
}

pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

/// Distinct line colors, cycled by series index.
pub const PALETTE: [[u8; 3]; 5] =
    [[214, 69, 65], [31, 119, 180], [44, 160, 44], [148, 103, 189], [255, 127, 14]];

struct Canvas {
    px: Array3<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { px: Array3::from_elem((h, w, 3), 255) }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        let (h, w, _) = self.px.dim();
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            for (c, &v) in color.iter().enumerate() {
                self.px[(y as usize, x as usize, c)] = v;
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn dot(&mut self, x: i64, y: i64, color: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            let gx = x + (i * (GLYPH_W + 1)) as i64;
            for (ry, row) in rows.iter().enumerate() {
                for bx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - bx) & 1 == 1 {
                        self.set(gx + bx as i64, y + ry as i64, color);
                    }
                }
            }
        }
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * (GLYPH_W + 1)
}

/// Short decimal label without trailing noise.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    };
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Renders line series into a PNG. Axis ranges cover all finite points with a
/// small pad; non-finite points are skipped.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    const W: usize = 640;
    const H: usize = 420;
    const L: i64 = 64;
    const R: i64 = (W - 20) as i64;
    const T: i64 = 32;
    const B: i64 = (H - 52) as i64;
    let black = [20, 20, 20];
    let grey = [200, 200, 200];

    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (mut y0, mut y1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
        (y0, y1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let ypad = (y1 - y0) * 0.05;
    y0 -= ypad;
    y1 += ypad;

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x0) / (x1 - x0);
        let fy = (y - y0) / (y1 - y0);
        (L + (fx * (R - L) as f64).round() as i64, B - (fy * (B - T) as f64).round() as i64)
    };

    let mut canvas = Canvas::new(W, H);
    // Grid and ticks.
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let (px, _) = to_px(xv, y0);
        let (_, py) = to_px(x0, yv);
        canvas.line(px, T, px, B, grey);
        canvas.line(L, py, R, py, grey);
        let xl = tick_label(xv);
        canvas.text(px - text_width(&xl) as i64 / 2, B + 6, &xl, black);
        let yl = tick_label(yv);
        canvas.text(L - 6 - text_width(&yl) as i64, py - 3, &yl, black);
    }
    canvas.line(L, T, L, B, black);
    canvas.line(L, B, R, B, black);
    canvas.text(L, T - 14, title, black);
    canvas.text((L + R) / 2 - text_width(x_label) as i64 / 2, B + 20, x_label, black);
    canvas.text(4, T - 14, y_label, black);

    for (si, s) in series.iter().enumerate() {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for w in pts.windows(2) {
            canvas.line(w[0].0, w[0].1, w[1].0, w[1].1, s.color);
        }
        for &(px, py) in &pts {
            canvas.dot(px, py, s.color);
        }
        // Legend swatch per series, top-right.
        let ly = T + 6 + (si as i64) * 12;
        let lx = R - 110;
        canvas.line(lx, ly + 3, lx + 14, ly + 3, s.color);
        canvas.text(lx + 20, ly, &s.label, black);
    }
    save_image_png(path, &canvas.px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_image_png;
    use tempfile::tempdir;

    fn sample_series() -> Vec<Series> {
        vec![
            Series {
                label: "miou".into(),
                color: PALETTE[0],
                points: (0..10).map(|i| (i as f64, (i as f64 * 0.7).sin() * 0.3 + 0.5)).collect(),
            },
            Series {
                label: "f1".into(),
                color: PALETTE[1],
                points: (0..10).map(|i| (i as f64, 1.0 - 0.5 / (1.0 + i as f64))).collect(),
            },
        ]
    }

    #[test]
    fn renders_a_decodable_png_with_ink() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("plot.png");
        line_plot(&path, "curves", "epoch", "score", &sample_series()).unwrap();
        let img = load_image_png(&path).unwrap();
        assert_eq!(img.dim(), (420, 640, 3));
        let non_white = img
            .outer_iter()
            .flat_map(|row| row.outer_iter().map(|p| p[0] < 0.99).collect::<Vec<_>>())
            .filter(|&b| b)
            .count();
        assert!(non_white > 500, "plot should contain drawn pixels, got {non_white}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        line_plot(&a, "t", "x", "y", &sample_series()).unwrap();
        line_plot(&b, "t", "x", "y", &sample_series()).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.png");
        line_plot(&path, "empty", "x", "y", &[]).unwrap();
        let one = [Series { label: "p".into(), color: PALETTE[2], points: vec![(0.5, 0.5)] }];
        line_plot(&path, "point", "x", "y", &one).unwrap();
        let nan = [Series {
            label: "n".into(),
            color: PALETTE[3],
            points: vec![(f64::NAN, 1.0), (1.0, f64::INFINITY)],
        }];
        line_plot(&path, "nan", "x", "y", &nan).unwrap();
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(0.25), "0.25");
        assert_eq!(tick_label(20.0), "20");
        assert_eq!(tick_label(123.0), "123");
        assert_eq!(tick_label(-0.1), "-0.1");
    }
}
