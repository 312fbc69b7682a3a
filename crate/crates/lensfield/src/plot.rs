//! Minimal PNG line charts.
//!
//! Hand-rasterized: axes, ticks, polylines, and a 5x7 bitmap font. No
//! styling state beyond the inputs, so a chart is a pure function of its
//! data and regenerates byte-identically from the same CSV.

use crate::error::{Error, Result};
use std::path::Path;

/// One polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: u32 = 720;
const HEIGHT: u32 = 480;
const MARGIN_L: i64 = 70;
const MARGIN_R: i64 = 20;
const MARGIN_T: i64 = 36;
const MARGIN_B: i64 = 52;

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// 5x7 glyphs for the characters charts need; columns are bit rows.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [0x3e, 0x51, 0x49, 0x45, 0x3e],
        '1' => [0x00, 0x42, 0x7f, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4b, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7f, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3c, 0x4a, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1e],
        'A' => [0x7e, 0x11, 0x11, 0x11, 0x7e],
        'B' => [0x7f, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3e, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7f, 0x41, 0x41, 0x22, 0x1c],
        'E' => [0x7f, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7f, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3e, 0x41, 0x49, 0x49, 0x7a],
        'H' => [0x7f, 0x08, 0x08, 0x08, 0x7f],
        'I' => [0x00, 0x41, 0x7f, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3f, 0x01],
        'K' => [0x7f, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7f, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7f, 0x02, 0x0c, 0x02, 0x7f],
        'N' => [0x7f, 0x04, 0x08, 0x10, 0x7f],
        'O' => [0x3e, 0x41, 0x41, 0x41, 0x3e],
        'P' => [0x7f, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3e, 0x41, 0x51, 0x21, 0x5e],
        'R' => [0x7f, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7f, 0x01, 0x01],
        'U' => [0x3f, 0x40, 0x40, 0x40, 0x3f],
        'V' => [0x1f, 0x20, 0x40, 0x20, 0x1f],
        'W' => [0x3f, 0x40, 0x38, 0x40, 0x3f],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '+' => [0x08, 0x08, 0x3e, 0x08, 0x08],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        ',' => [0x00, 0x80, 0x60, 0x00, 0x00],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '(' => [0x00, 0x1c, 0x22, 0x41, 0x00],
        ')' => [0x00, 0x41, 0x22, 0x1c, 0x00],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        '%' => [0x23, 0x13, 0x08, 0x64, 0x62],
        '=' => [0x14, 0x14, 0x14, 0x14, 0x14],
        ' ' => [0x00; 5],
        _ => [0x7f, 0x41, 0x41, 0x41, 0x7f], // unknown: box
    }
}

struct Canvas {
    data: Vec<u8>,
}

impl Canvas {
    fn new() -> Canvas {
        Canvas {
            data: vec![255; (WIDTH * HEIGHT * 3) as usize],
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let idx = ((y as u32 * WIDTH + x as u32) * 3) as usize;
        self.data[idx..idx + 3].copy_from_slice(&rgb);
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        // Bresenham.
        let (dx, sx) = ((x1 - x0).abs(), if x0 < x1 { 1 } else { -1 });
        let (dy, sy) = (-(y1 - y0).abs(), if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, rgb);
            self.put(x, y + 1, rgb); // 2px strokes read better
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

    fn text(&mut self, x: i64, y: i64, s: &str, rgb: [u8; 3]) {
        let mut cx = x;
        for c in s.chars() {
            let g = glyph(c);
            for (col, bits) in g.iter().enumerate() {
                for row in 0..7 {
                    if bits >> row & 1 == 1 {
                        self.put(cx + col as i64, y + row, rgb);
                    }
                }
            }
            cx += 6;
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 6
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag * if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    let mut ticks = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

/// Renders series as a line chart PNG.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::domain("cannot plot empty series"));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.06;
    y0 -= pad;
    y1 += pad;

    let plot_w = WIDTH as i64 - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT as i64 - MARGIN_T - MARGIN_B;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            MARGIN_L + ((x - x0) / (x1 - x0) * plot_w as f64).round() as i64,
            MARGIN_T + plot_h - ((y - y0) / (y1 - y0) * plot_h as f64).round() as i64,
        )
    };

    let mut canvas = Canvas::new();
    let ink = [40, 40, 40];
    let grid = [225, 225, 225];

    for t in nice_ticks(y0, y1) {
        let (_, py) = to_px(x0, t);
        canvas.line(MARGIN_L, py, MARGIN_L + plot_w, py, grid);
        let label = fmt_tick(t);
        canvas.text(MARGIN_L - 6 - Canvas::text_width(&label), py - 3, &label, ink);
    }
    for t in nice_ticks(x0, x1) {
        let (px, _) = to_px(t, y0);
        canvas.line(px, MARGIN_T, px, MARGIN_T + plot_h, grid);
        let label = fmt_tick(t);
        canvas.text(px - Canvas::text_width(&label) / 2, MARGIN_T + plot_h + 8, &label, ink);
    }
    // Axes over the grid.
    canvas.line(MARGIN_L, MARGIN_T, MARGIN_L, MARGIN_T + plot_h, ink);
    canvas.line(
        MARGIN_L,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h,
        ink,
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                canvas.line(q.0, q.1, p.0, p.1, color);
            }
            // Point marker.
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    canvas.put(p.0 + dx, p.1 + dy, color);
                }
            }
            prev = Some(p);
        }
        // Legend entry.
        let ly = MARGIN_T + 6 + si as i64 * 12;
        let lx = MARGIN_L + plot_w - 150;
        canvas.line(lx, ly + 3, lx + 18, ly + 3, color);
        canvas.text(lx + 24, ly, &s.label, ink);
    }

    canvas.text(
        (WIDTH as i64 - Canvas::text_width(title)) / 2,
        10,
        title,
        ink,
    );
    canvas.text(
        MARGIN_L + (plot_w - Canvas::text_width(x_label)) / 2,
        HEIGHT as i64 - 16,
        x_label,
        ink,
    );
    canvas.text(6, MARGIN_T - 14, y_label, ink);

    let img = image::RgbImage::from_raw(WIDTH, HEIGHT, canvas.data)
        .expect("canvas buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
