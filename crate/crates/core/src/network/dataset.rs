//! Procedural shapes-on-texture images with exact bounding boxes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Raw pixel statistics of the generator, used to standardize images.
pub const PIXEL_MEAN: f32 = 0.2686;
pub const PIXEL_STD: f32 = 0.182;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether the point `(u, v)`, in box-relative units `[0,1)^2`, is inside.
    fn covers(self, u: f32, v: f32) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Disk => r2 <= 0.25,
            ShapeKind::Square => (0.05..0.95).contains(&u) && (0.05..0.95).contains(&v),
            ShapeKind::Triangle => (0.05..=0.95).contains(&v) && du.abs() <= 0.5 * (v - 0.05) / 0.9,
            ShapeKind::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
        }
    }
}

/// Axis-aligned box, top-left origin, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unique across both splits: train ids come first.
    pub id: usize,
    /// Standardized image `[C, H, W]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            image_size: 64,
            channels: 1,
            train_count: 4000,
            val_count: 500,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=ShapeKind::ALL.len()).contains(&self.classes) {
            return Err(Error::InvalidArgument(format!(
                "classes must be in 2..=5, got {}",
                self.classes
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "image size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.train_count + self.val_count == 0 {
            return Err(Error::InvalidArgument("dataset would be empty".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "classes={}\nimage_size={}\nchannels={}\ntrain_count={}\nval_count={}\nseed={}\n",
            self.classes, self.image_size, self.channels, self.train_count, self.val_count, self.seed
        )
    }

    /// Parse `key=value` lines; `#` starts a comment, unknown keys are errors,
    /// missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: std::num::ParseIntError| Error::Format(format!("line {}: {k}: {e}", lineno + 1));
            match k {
                "classes" => cfg.classes = v.parse().map_err(bad)?,
                "image_size" => cfg.image_size = v.parse().map_err(bad)?,
                "channels" => cfg.channels = v.parse().map_err(bad)?,
                "train_count" => cfg.train_count = v.parse().map_err(bad)?,
                "val_count" => cfg.val_count = v.parse().map_err(bad)?,
                "seed" => cfg.seed = v.parse().map_err(bad)?,
                _ => return Err(Error::Format(format!("line {}: unknown key `{k}`", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VAL: u64 = 2;

fn render(cfg: &DatasetConfig, split: u64, index: usize, id: usize) -> Sample {
    let mut rng = rng_from(cfg.seed, &[split, index as u64]);
    let n = cfg.image_size;
    let label = index % cfg.classes;
    let kind = ShapeKind::ALL[label];

    // Background: two oriented sinusoids plus pixel noise, kept in [0, 0.5].
    let mut waves = [(0f32, 0f32, 0f32, 0f32); 2];
    for w in &mut waves {
        let freq = rng.random_range(0.05f32..0.35);
        let angle = rng.random_range(0.0f32..std::f32::consts::PI);
        *w = (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0f32..6.3), rng.random_range(0.03f32..0.09));
    }
    let base = rng.random_range(0.15f32..0.3);
    let side = rng.random_range(16..=26usize).min(n / 2);
    let bx = rng.random_range(0..=n - side);
    let by = rng.random_range(0..=n - side);
    let mut tint = [0f32; 3];
    for t in tint.iter_mut().take(cfg.channels) {
        *t = rng.random_range(0.7f32..1.0);
    }

    let mut data = vec![0f32; cfg.channels * n * n];
    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            let mut bg = base;
            for &(fx, fy, ph, amp) in &waves {
                bg += amp * (fx * x as f32 + fy * y as f32 + ph).sin();
            }
            let inside = x >= bx && x < bx + side && y >= by && y < by + side && {
                let u = (x - bx) as f32 + 0.5;
                let v = (y - by) as f32 + 0.5;
                kind.covers(u / side as f32, v / side as f32)
            };
            if inside {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            for (c, &t) in tint.iter().enumerate().take(cfg.channels) {
                let noise = rng.random_range(-0.08f32..0.08);
                let raw = if inside { t + 0.5 * noise } else { (bg + noise).clamp(0.0, 0.5) };
                data[c * n * n + y * n + x] = (raw - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    Sample {
        id,
        image: Tensor::from_vec(vec![cfg.channels, n, n], data).expect("image dims are positive"),
        label,
        bbox: BBox {
            x: x0,
            y: y0,
            w: x1 + 1 - x0,
            h: y1 + 1 - y0,
        },
    }
}

impl ShapesDataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let train = (0..config.train_count)
            .map(|i| render(&config, SPLIT_TRAIN, i, i))
            .collect();
        let val = (0..config.val_count)
            .map(|i| render(&config, SPLIT_VAL, i, config.train_count + i))
            .collect();
        Ok(Self { config, train, val })
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val)
    }

    /// Stack images into `[N, C, H, W]`.
    pub fn batch<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor<f32>> {
        let imgs: Vec<&Tensor<f32>> = samples.into_iter().map(|s| &s.image).collect();
        if imgs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Tensor::stack(&imgs)
    }

    /// Per-channel mean of the training images (standardized space).
    pub fn channel_means(&self) -> Vec<f32> {
        let src: Vec<&Sample> = if self.train.is_empty() {
            self.val.iter().collect()
        } else {
            self.train.iter().collect()
        };
        let c = self.config.channels;
        let plane = self.config.image_size * self.config.image_size;
        let mut acc = vec![0f64; c];
        for s in &src {
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += s.image.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        acc.iter().map(|a| (a / (src.len() * plane) as f64) as f32).collect()
    }

    /// `image_id,x,y,w,h` per line for every sample.
    pub fn boxes_text(&self) -> String {
        let mut s = String::new();
        for smp in self.samples() {
            let b = smp.bbox;
            let _ = writeln!(s, "{},{},{},{},{}", smp.id, b.x, b.y, b.w, b.h);
        }
        s
    }

    /// `image_id,split,label` per line for every sample.
    pub fn labels_text(&self) -> String {
        let mut s = String::new();
        for smp in &self.train {
            let _ = writeln!(s, "{},train,{}", smp.id, smp.label);
        }
        for smp in &self.val {
            let _ = writeln!(s, "{},val,{}", smp.id, smp.label);
        }
        s
    }

    /// Write `config.txt`, `boxes.txt` and `labels.txt` into `dir`. Images
    /// are regenerated from the config on load.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_kv())?;
        fs::write(dir.join("boxes.txt"), self.boxes_text())?;
        fs::write(dir.join("labels.txt"), self.labels_text())?;
        Ok(())
    }

    /// Regenerate from `dir/config.txt`; fails if a saved boxes file
    /// disagrees with the regenerated one.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = DatasetConfig::from_kv(&fs::read_to_string(dir.join("config.txt"))?)?;
        let ds = Self::generate(cfg)?;
        let boxes = dir.join("boxes.txt");
        if boxes.exists() {
            let stored = parse_boxes(&fs::read_to_string(boxes)?)?;
            let ours: Vec<(usize, BBox)> = ds.samples().map(|s| (s.id, s.bbox)).collect();
            if stored != ours {
                return Err(Error::Format("boxes.txt does not match the dataset config".into()));
            }
        }
        Ok(ds)
    }
}

pub fn parse_boxes(text: &str) -> Result<Vec<(usize, BBox)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<usize> = l
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("boxes line {}: {e}", i + 1)))?;
            match f[..] {
                [id, x, y, w, h] => Ok((id, BBox { x, y, w, h })),
                _ => Err(Error::Format(format!("boxes line {}: expected 5 fields", i + 1))),
            }
        })
        .collect()
}
