//! Minimal PNG line charts (no text; legends go in a sidecar).

use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::write_rgb_png;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dashed: bool,
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], dashed: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err, mut step) = (x0, y0, dx + dy, 0u32);
        loop {
            if !dashed || (step / 4) % 2 == 0 {
                self.put(x, y, c);
                self.put(x, y + 1, c);
            }
            step += 1;
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
}

/// Render `series` into a `width x height` PNG. Returns the legend text
/// (one `color<TAB>label` line per series, plus the axis ranges).
pub fn line_chart(path: impl AsRef<Path>, series: &[Series], width: usize, height: usize) -> Result<String> {
    if series.is_empty() || width < 40 || height < 40 {
        return Err(Error::InvalidArgument("chart needs series and at least 40x40 pixels".into()));
    }
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.x.iter().filter(finite));
    let ys = series.iter().flat_map(|s| s.y.iter().filter(finite));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
    let margin = 20i64;
    let mut cv = Canvas {
        w: width,
        h: height,
        rgb: vec![255; width * height * 3],
    };
    let (pw, ph) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let to_px = |x: f64, y: f64| {
        (
            margin + ((x - x0) / (x1 - x0) * pw as f64).round() as i64,
            margin + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64,
        )
    };
    let axis = [0, 0, 0];
    cv.line((margin, margin + ph), (margin + pw, margin + ph), axis, false);
    cv.line((margin, margin), (margin, margin + ph), axis, false);
    if y0 < 0.0 && y1 > 0.0 {
        let (_, zy) = to_px(x0, 0.0);
        cv.line((margin, zy), (margin + pw, zy), [200, 200, 200], true);
    }
    let mut legend = format!("x_range={x0},{x1}\ny_range={y0},{y1}\n");
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .x
            .iter()
            .zip(s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| to_px(x, y))
            .collect();
        for p in pts.windows(2) {
            cv.line(p[0], p[1], c, s.dashed);
        }
        legend.push_str(&format!(
            "#{:02x}{:02x}{:02x}{}\t{}\n",
            c[0],
            c[1],
            c[2],
            if s.dashed { " dashed" } else { "" },
            s.label
        ));
    }
    write_rgb_png(path, width, height, &cv.rgb)?;
    Ok(legend)
}
