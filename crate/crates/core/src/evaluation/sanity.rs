//! Cascading parameter randomization.

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::{LayerKind, Model};

use super::ssim::ssim;

/// Clamp to the 1st / 99th percentile (linear interpolation between order
/// statistics) and rescale to `[0,1]`; constant maps become zeros.
pub fn percentile_normalize(values: &[f32]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let (lo, hi) = (pct(0.01), pct(0.99));
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v as f64).clamp(lo, hi) - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean SSIM (window 5) between percentile-normalized map pairs.
pub fn mean_ssim(a: &[Heatmap], b: &[Heatmap]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!("{} vs {} heatmaps", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.values.shape() != y.values.shape() {
            return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.values.shape(), y.values.shape())));
        }
        let (h, w) = (x.height(), x.width());
        total += ssim(&percentile_normalize(x.data()), &percentile_normalize(y.data()), h, w, 5)?;
    }
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanityPoint {
    /// `none`, or the earliest randomized layer.
    pub depth: String,
    /// Every layer with re-drawn parameters.
    pub randomized: Vec<String>,
    pub mean_ssim: f64,
}

/// Parameterized layers from the output back to the input.
pub fn default_layer_order(model: &Model) -> Vec<String> {
    model
        .spec()
        .layers()
        .iter()
        .rev()
        .filter(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. }))
        .map(|l| l.name.clone())
        .collect()
}

/// Heatmaps of the original model compared with heatmaps after
/// randomizing from each layer of `order` onward (cumulatively, output
/// side first). `heatmaps_for` must be deterministic for a given model.
pub fn sanity_check(
    model: &Model,
    order: &[String],
    seed: u64,
    heatmaps_for: &mut dyn FnMut(&Model) -> Result<Vec<Heatmap>>,
) -> Result<Vec<SanityPoint>> {
    let reference = heatmaps_for(model)?;
    let again = heatmaps_for(model)?;
    let mut out = vec![SanityPoint {
        depth: "none".into(),
        randomized: Vec::new(),
        mean_ssim: mean_ssim(&reference, &again)?,
    }];
    let names: Vec<String> = model.spec().layers().iter().map(|l| l.name.clone()).collect();
    for layer in order {
        let start = model.spec().layer_index(layer)?;
        let randomized = model.randomize_from(layer, seed)?;
        let maps = heatmaps_for(&randomized)?;
        out.push(SanityPoint {
            depth: layer.clone(),
            randomized: names[start..]
                .iter()
                .zip(&model.params()[start..])
                .filter(|(_, p)| p.is_some())
                .map(|(n, _)| n.clone())
                .collect(),
            mean_ssim: mean_ssim(&reference, &maps)?,
        });
    }
    Ok(out)
}
