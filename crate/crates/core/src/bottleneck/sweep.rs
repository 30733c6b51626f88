use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Model, Sample, TapPoint};

use super::per_sample::{fit_mask, BottleneckConfig};
use super::stats::FeatureStats;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta_over_k: f64,
    pub tap: String,
    /// Mean over images of the fitted information per feature, nats.
    pub mean_info_per_k: f64,
    /// Mean over images of the post-fit target probability.
    pub mean_class_prob: f64,
    pub images: usize,
}

/// Fit per-sample masks for every `(beta, tap)` pair and average the
/// information and target probability over `images`.
pub fn beta_depth_sweep(
    model: &Model,
    images: &[Sample],
    betas: &[f64],
    taps: &[(TapPoint, FeatureStats)],
    base: &BottleneckConfig,
) -> Result<Vec<SweepRow>> {
    if images.is_empty() || betas.is_empty() || taps.is_empty() {
        return Err(Error::InvalidArgument("sweep needs images, betas and taps".into()));
    }
    let mut rows = Vec::new();
    for (tap, stats) in taps {
        for &beta in betas {
            let cfg = BottleneckConfig {
                beta_over_k: beta,
                ..base.clone()
            };
            let fits: Vec<(f64, f64)> = images
                .par_iter()
                .map(|s| {
                    let d = fit_mask(model, tap, stats, &s.image, Some(s.label), &cfg.for_image(s.id))?.diagnostics;
                    Ok((d.info_per_k, d.final_prob))
                })
                .collect::<Result<_>>()?;
            let n = fits.len() as f64;
            rows.push(SweepRow {
                beta_over_k: beta,
                tap: tap.name.clone(),
                mean_info_per_k: fits.iter().map(|f| f.0).sum::<f64>() / n,
                mean_class_prob: fits.iter().map(|f| f.1).sum::<f64>() / n,
                images: fits.len(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tap\tbeta_over_k\tmean_info_per_k_nats\tmean_class_prob\timages\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\n",
            r.tap, r.beta_over_k, r.mean_info_per_k, r.mean_class_prob, r.images
        ));
    }
    s
}
