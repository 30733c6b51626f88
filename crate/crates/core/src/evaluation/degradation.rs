//! Tile-removal degradation (most / least relevant first).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::{Model, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    MoRF,
    LeRF,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::MoRF => "morf",
            Direction::LeRF => "lerf",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationCurve {
    pub direction: Direction,
    pub tile: usize,
    /// Fraction of tiles replaced, `0 ..= 1`.
    pub x: Vec<f64>,
    /// Normalized score `(p - b) / (t1 - b)` averaged over images.
    pub y: Vec<f64>,
}

impl DegradationCurve {
    /// Score lost by removing the first tile.
    pub fn first_step_drop(&self) -> f64 {
        self.y[0] - self.y[1]
    }
}

/// Tile grid for an `h x w` image, partial tiles at the right/bottom edge.
fn tiles(h: usize, w: usize, tile: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y in (0..h).step_by(tile) {
        for x in (0..w).step_by(tile) {
            out.push((y, x, (y + tile).min(h), (x + tile).min(w)));
        }
    }
    out
}

/// Tile indices (row-major numbering) in removal order. Ties keep the
/// lower index first in both directions.
pub fn tile_order(heatmap: &Heatmap, tile: usize, direction: Direction) -> Vec<usize> {
    let w = heatmap.width();
    let grid = tiles(heatmap.height(), w, tile);
    let score: Vec<f64> = grid
        .iter()
        .map(|&(y0, x0, y1, x1)| {
            (y0..y1)
                .flat_map(|y| heatmap.data()[y * w + x0..y * w + x1].iter())
                .map(|&v| v as f64)
                .sum()
        })
        .collect();
    let mut idx: Vec<usize> = (0..grid.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = match direction {
            Direction::MoRF => score[b].total_cmp(&score[a]),
            Direction::LeRF => score[a].total_cmp(&score[b]),
        };
        ord.then(a.cmp(&b))
    });
    idx
}

fn target_probs(model: &Model, x: &Tensor<f32>, targets: &[usize]) -> Result<Vec<f64>> {
    let p = model.probabilities(x)?;
    let k = p.shape()[1];
    Ok(targets.iter().enumerate().map(|(i, &t)| p.data()[i * k + t] as f64).collect())
}

/// Target probability after each removal step for one image: entry `i` has
/// `i` tiles replaced by `fill` (per channel).
fn image_trace(model: &Model, sample: &Sample, order: &[usize], tile: usize, fill: &[f32]) -> Result<Vec<f64>> {
    let (c, h, w) = match *sample.image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("degradation", format!("image {:?}", sample.image.shape()))),
    };
    if fill.len() != c {
        return Err(Error::shape("degradation", format!("{} fill values for {c} channels", fill.len())));
    }
    let grid = tiles(h, w, tile);
    let mut img = sample.image.data().to_vec();
    let mut data = Vec::with_capacity((order.len() + 1) * img.len());
    data.extend_from_slice(&img);
    for &t in order {
        let (y0, x0, y1, x1) = grid[t];
        for (ch, &f) in fill.iter().enumerate() {
            for y in y0..y1 {
                img[ch * h * w + y * w + x0..ch * h * w + y * w + x1].fill(f);
            }
        }
        data.extend_from_slice(&img);
    }
    let x = Tensor::from_vec(vec![order.len() + 1, c, h, w], data)?;
    target_probs(model, &x, &vec![sample.label; order.len() + 1])
}

/// Normalization constants: `t1` = mean target probability on the intact
/// images, `b` = mean target probability on fully replaced images.
pub fn normalization(model: &Model, samples: &[Sample], fill: &[f32]) -> Result<(f64, f64)> {
    let x = crate::network::ShapesDataset::batch(samples)?;
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let t1 = mean(&target_probs(model, &x, &targets)?);
    let (c, h, w) = match *samples[0].image.shape() {
        [c, h, w] => (c, h, w),
        _ => unreachable!("batched above"),
    };
    let blank: Vec<f32> = fill.iter().flat_map(|&f| std::iter::repeat_n(f, h * w)).collect();
    let one = Tensor::from_vec(vec![1, c, h, w], blank)?;
    let p = model.probabilities(&one)?;
    let k = p.shape()[1];
    let b = mean(&targets.iter().map(|&t| p.data()[t.min(k - 1)] as f64).collect::<Vec<_>>());
    Ok((t1, b))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// MoRF and LeRF curves for one method.
pub fn degradation_curves(
    model: &Model,
    samples: &[Sample],
    heatmaps: &[Heatmap],
    tile: usize,
    fill: &[f32],
) -> Result<(DegradationCurve, DegradationCurve)> {
    let morf = degradation_curve(model, samples, heatmaps, tile, Direction::MoRF, fill)?;
    let lerf = degradation_curve(model, samples, heatmaps, tile, Direction::LeRF, fill)?;
    Ok((morf, lerf))
}

pub fn degradation_curve(
    model: &Model,
    samples: &[Sample],
    heatmaps: &[Heatmap],
    tile: usize,
    direction: Direction,
    fill: &[f32],
) -> Result<DegradationCurve> {
    if samples.len() != heatmaps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} heatmaps",
            samples.len(),
            heatmaps.len()
        )));
    }
    if samples.is_empty() || tile == 0 {
        return Err(Error::InvalidArgument("degradation needs images and a tile size >= 1".into()));
    }
    let (t1, b) = normalization(model, samples, fill)?;
    let traces: Vec<Vec<f64>> = samples
        .par_iter()
        .zip(heatmaps)
        .map(|(s, hm)| {
            if s.image.shape()[1..] != [hm.height(), hm.width()] {
                return Err(Error::shape(
                    "degradation",
                    format!("heatmap {:?} for image {:?}", hm.values.shape(), s.image.shape()),
                ));
            }
            image_trace(model, s, &tile_order(hm, tile, direction), tile, fill)
        })
        .collect::<Result<_>>()?;
    let steps = traces[0].len();
    let denom = t1 - b;
    let y = (0..steps)
        .map(|i| {
            let p = traces.iter().map(|t| t[i]).sum::<f64>() / traces.len() as f64;
            (p - b) / denom
        })
        .collect();
    let x = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    Ok(DegradationCurve { direction, tile, x, y })
}

/// Trapezoidal integral of `lerf - morf` over the removed fraction.
pub fn degradation_integral(morf: &DegradationCurve, lerf: &DegradationCurve) -> Result<f64> {
    if morf.x != lerf.x || morf.y.len() != lerf.y.len() {
        return Err(Error::InvalidArgument("curves are on different grids".into()));
    }
    let d: Vec<f64> = lerf.y.iter().zip(&morf.y).map(|(l, m)| l - m).collect();
    Ok(morf
        .x
        .windows(2)
        .zip(d.windows(2))
        .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
        .sum())
}
