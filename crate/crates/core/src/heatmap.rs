//! Attribution maps and their on-disk formats.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    /// Information per pixel, from the bottleneck methods.
    Bits,
    /// Method-specific relevance scores.
    Relevance,
}

impl Units {
    pub fn name(self) -> &'static str {
        match self {
            Units::Bits => "bits",
            Units::Relevance => "relevance",
        }
    }
}

/// A per-pixel attribution grid `[H, W]` with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor<f32>,
    pub method: String,
    pub units: Units,
    pub tap: Option<String>,
    pub beta_over_k: Option<f64>,
    pub image_id: Option<usize>,
}

impl Heatmap {
    pub fn new(values: Tensor<f32>, method: impl Into<String>, units: Units) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("heatmap", format!("need [H,W], got {:?}", values.shape())));
        }
        Ok(Self {
            values,
            method: method.into(),
            units,
            tap: None,
            beta_over_k: None,
            image_id: None,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    pub fn total(&self) -> f64 {
        self.values.data().iter().map(|&v| v as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `H` lines of `W` comma-separated values.
    pub fn to_csv(&self) -> String {
        let w = self.width();
        let mut s = String::with_capacity(self.values.numel() * 12);
        for row in self.values.data().chunks(w) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, method: impl Into<String>, units: Units) -> Result<Self> {
        let mut data = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f32> = line
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("heatmap row {}: {e}", i + 1)))?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::Format(format!("heatmap row {} has {} values", i + 1, row.len())));
            }
            data.extend(row);
            rows += 1;
        }
        let width = width.ok_or_else(|| Error::Format("empty heatmap".into()))?;
        Self::new(Tensor::from_vec(vec![rows, width], data)?, method, units)
    }

    /// `key=value` description: provenance, total and value range.
    pub fn sidecar(&self) -> String {
        let (lo, hi) = self.min_max();
        let mut s = String::new();
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "units={}", self.units.name());
        if let Some(t) = &self.tap {
            let _ = writeln!(s, "tap={t}");
        }
        if let Some(b) = self.beta_over_k {
            let _ = writeln!(s, "beta_over_k={b}");
        }
        if let Some(id) = self.image_id {
            let _ = writeln!(s, "image_id={id}");
        }
        let _ = writeln!(s, "height={}", self.height());
        let _ = writeln!(s, "width={}", self.width());
        let _ = writeln!(s, "total={}", self.total());
        let _ = writeln!(s, "min={lo}");
        let _ = writeln!(s, "max={hi}");
        s
    }

    /// Write `<stem>.csv`, `<stem>.txt` and `<stem>.png` into `dir`; returns
    /// the paths written.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{stem}.csv"));
        let side = dir.join(format!("{stem}.txt"));
        let png = dir.join(format!("{stem}.png"));
        fs::write(&csv, self.to_csv())?;
        fs::write(&side, self.sidecar())?;
        self.write_png(&png)?;
        Ok(vec![csv, side, png])
    }

    /// 8-bit RGB rendering, min-max scaled through [`colormap`].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (lo, hi) = self.min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut rgb = Vec::with_capacity(self.values.numel() * 3);
        for &v in self.values.data() {
            rgb.extend(colormap(((v - lo) / span) as f64));
        }
        write_rgb_png(path, self.width(), self.height(), &rgb)
    }
}

pub(crate) fn write_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(rgb).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Dark-purple to yellow ramp for `t` in `[0, 1]` (clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (VIRIDIS[i][c] + f * (VIRIDIS[i + 1][c] - VIRIDIS[i][c])).round() as u8;
    }
    out
}

/// Channel-sum of a per-element KL map `[c,h,w]` (nats), converted to bits
/// and resized to `(out_h, out_w)` so that each pixel holds bits/pixel and
/// the image total matches the feature-map total.
pub fn kl_to_pixels(kl: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *kl.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("heatmap", format!("need [c,h,w], got {:?}", kl.shape()))),
    };
    let mut plane = vec![0f64; h * w];
    for ch in kl.data().chunks(h * w).take(c) {
        for (p, &v) in plane.iter_mut().zip(ch) {
            *p += v as f64;
        }
    }
    let bits: Vec<f32> = plane.iter().map(|v| (v / std::f64::consts::LN_2) as f32).collect();
    let up = resize_bilinear(&Tensor::from_vec(vec![1, 1, h, w], bits)?, out_h, out_w)?;
    let area = (out_h * out_w) as f32 / (h * w) as f32;
    up.map(|v| v / area).reshape(vec![out_h, out_w])
}
