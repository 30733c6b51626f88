//! Correlation between removed attribution mass and the target-logit drop.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::{Model, Sample};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurve {
    /// Requested pixel counts.
    pub n: Vec<usize>,
    /// Tiles removed per set for each `n`.
    pub tiles: Vec<usize>,
    /// Mean over images of the per-image Pearson correlation.
    pub correlation: Vec<f64>,
}

/// `points` log-spaced pixel counts from one tile to 80% of the image.
pub fn n_grid(height: usize, width: usize, tile: usize, points: usize) -> Vec<usize> {
    let lo = (tile * tile) as f64;
    let hi = 0.8 * (height * width) as f64;
    if points <= 1 {
        return vec![lo as usize];
    }
    let mut out: Vec<usize> = (0..points)
        .map(|i| (lo * (hi / lo).powf(i as f64 / (points - 1) as f64)).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Tiles covering about `n` pixels: the nearest count, at least one.
pub fn tiles_for(n: usize, tile: usize, available: usize) -> usize {
    ((n as f64 / (tile * tile) as f64).round() as usize).clamp(1, available)
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

type Tiles = Vec<(usize, usize, usize, usize)>;

fn tile_grid(h: usize, w: usize, tile: usize) -> Tiles {
    let mut out = Vec::new();
    for y in (0..h).step_by(tile) {
        for x in (0..w).step_by(tile) {
            out.push((y, x, (y + tile).min(h), (x + tile).min(w)));
        }
    }
    out
}

/// Random tile sets and the logit drops they cause for one image.
fn image_drops(
    model: &Model,
    s: &Sample,
    grid: &Tiles,
    counts: &[usize],
    sets_per_n: usize,
    seed: u64,
) -> Result<Vec<Vec<(Vec<usize>, f64)>>> {
    let (c, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
    let k = model.spec().classes();
    let mut one = vec![1];
    one.extend_from_slice(s.image.shape());
    let base = model.logits(&s.image.reshape(one)?)?.data()[s.label] as f64;
    let mut out = Vec::with_capacity(counts.len());
    for (ni, &m) in counts.iter().enumerate() {
        let mut rng = rng_from(seed, &[s.id as u64, ni as u64]);
        let sets: Vec<Vec<usize>> = (0..sets_per_n)
            .map(|_| sample_indices(&mut rng, grid.len(), m).into_vec())
            .collect();
        let mut data = Vec::with_capacity(sets.len() * s.image.numel());
        for set in &sets {
            let mut img = s.image.data().to_vec();
            for &t in set {
                let (y0, x0, y1, x1) = grid[t];
                for ch in 0..c {
                    for y in y0..y1 {
                        img[ch * h * w + y * w + x0..ch * h * w + y * w + x1].fill(0.0);
                    }
                }
            }
            data.extend(img);
        }
        let logits = model.logits(&Tensor::from_vec(vec![sets.len(), c, h, w], data)?)?;
        out.push(
            sets.into_iter()
                .enumerate()
                .map(|(i, set)| (set, base - logits.data()[i * k + s.label] as f64))
                .collect(),
        );
    }
    Ok(out)
}

/// Sensitivity-n for several methods at once; the same random sets (and
/// hence the same model evaluations) are shared by all methods.
/// `heatmaps[m][i]` is method `m`'s map for `samples[i]`.
pub fn sensitivity_n_many(
    model: &Model,
    samples: &[Sample],
    heatmaps: &[&[Heatmap]],
    n_grid: &[usize],
    sets_per_n: usize,
    tile: usize,
    seed: u64,
) -> Result<Vec<SensitivityCurve>> {
    if samples.is_empty() || n_grid.is_empty() || sets_per_n < 2 || tile == 0 {
        return Err(Error::InvalidArgument(
            "sensitivity-n needs images, an n grid, at least 2 sets and a tile >= 1".into(),
        ));
    }
    for hs in heatmaps {
        if hs.len() != samples.len() {
            return Err(Error::InvalidArgument(format!("{} images but {} heatmaps", samples.len(), hs.len())));
        }
    }
    let (h, w) = (samples[0].image.shape()[1], samples[0].image.shape()[2]);
    let grid = tile_grid(h, w, tile);
    let counts: Vec<usize> = n_grid.iter().map(|&n| tiles_for(n, tile, grid.len())).collect();
    let drops: Vec<Vec<Vec<(Vec<usize>, f64)>>> = samples
        .par_iter()
        .map(|s| image_drops(model, s, &grid, &counts, sets_per_n, seed))
        .collect::<Result<_>>()?;

    let mut curves = Vec::with_capacity(heatmaps.len());
    for hs in heatmaps {
        let mut corr = vec![0.0; counts.len()];
        for (i, hm) in hs.iter().enumerate() {
            if (hm.height(), hm.width()) != (h, w) {
                return Err(Error::shape("sensitivity_n", format!("heatmap {:?}", hm.values.shape())));
            }
            let tile_mass: Vec<f64> = grid
                .iter()
                .map(|&(y0, x0, y1, x1)| {
                    (y0..y1)
                        .flat_map(|y| hm.data()[y * w + x0..y * w + x1].iter())
                        .map(|&v| v as f64)
                        .sum()
                })
                .collect();
            for (ni, sets) in drops[i].iter().enumerate() {
                let mass: Vec<f64> = sets.iter().map(|(set, _)| set.iter().map(|&t| tile_mass[t]).sum()).collect();
                let drop: Vec<f64> = sets.iter().map(|(_, d)| *d).collect();
                corr[ni] += pearson(&mass, &drop);
            }
        }
        curves.push(SensitivityCurve {
            n: n_grid.to_vec(),
            tiles: counts.clone(),
            correlation: corr.into_iter().map(|c| c / samples.len() as f64).collect(),
        });
    }
    Ok(curves)
}

pub fn sensitivity_n(
    model: &Model,
    samples: &[Sample],
    heatmaps: &[Heatmap],
    n_grid: &[usize],
    sets_per_n: usize,
    tile: usize,
    seed: u64,
) -> Result<SensitivityCurve> {
    Ok(sensitivity_n_many(model, samples, &[heatmaps], n_grid, sets_per_n, tile, seed)?.remove(0))
}
