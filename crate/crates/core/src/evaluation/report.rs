use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::{Model, Sample};

use super::bbox::bbox_ratio;
use super::degradation::{degradation_curves, degradation_integral, DegradationCurve};
use super::plot::{line_chart, Series};
use super::sanity::SanityPoint;
use super::sensitivity::{n_grid, sensitivity_n_many, SensitivityCurve};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MethodScores {
    pub method: String,
    /// `(morf, lerf, integral)`
    pub degradation: Option<(DegradationCurve, DegradationCurve, f64)>,
    pub sensitivity: Option<SensitivityCurve>,
    pub bbox_ratio: Option<f64>,
    pub sanity: Option<Vec<SanityPoint>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub tile: usize,
    pub methods: Vec<MethodScores>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tile: usize,
    /// Per-channel replacement value for removed tiles.
    pub fill: Vec<f32>,
    /// Sensitivity-n runs on this many leading samples; 0 skips it.
    pub sensitivity_images: usize,
    pub sensitivity_points: usize,
    pub sensitivity_sets: usize,
    pub bbox: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tile: 8,
            fill: vec![0.0],
            sensitivity_images: 10,
            sensitivity_points: 6,
            sensitivity_sets: 100,
            bbox: true,
            seed: 0,
        }
    }
}

/// Degradation, bounding-box and Sensitivity-n scores for precomputed
/// heatmaps; `maps[m].1[i]` belongs to `samples[i]`.
pub fn evaluate(model: &Model, samples: &[Sample], maps: &[(String, Vec<Heatmap>)], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one image".into()));
    }
    let mut methods = Vec::with_capacity(maps.len());
    for (name, hms) in maps {
        let (morf, lerf) = degradation_curves(model, samples, hms, cfg.tile, &cfg.fill)?;
        let integral = degradation_integral(&morf, &lerf)?;
        let bbox = if cfg.bbox {
            let mut sum = 0.0;
            for (s, h) in samples.iter().zip(hms) {
                sum += bbox_ratio(h, &s.bbox)?;
            }
            Some(sum / samples.len() as f64)
        } else {
            None
        };
        methods.push(MethodScores {
            method: name.clone(),
            degradation: Some((morf, lerf, integral)),
            bbox_ratio: bbox,
            ..Default::default()
        });
    }
    let k = cfg.sensitivity_images.min(samples.len());
    if k > 0 && !maps.is_empty() {
        let (_, h, w) = model.spec().input_shape();
        let grid = n_grid(h, w, cfg.tile, cfg.sensitivity_points);
        let refs: Vec<&[Heatmap]> = maps.iter().map(|(_, hms)| &hms[..k]).collect();
        let curves = sensitivity_n_many(model, &samples[..k], &refs, &grid, cfg.sensitivity_sets, cfg.tile, cfg.seed)?;
        for (m, c) in methods.iter_mut().zip(curves) {
            m.sensitivity = Some(c);
        }
    }
    Ok(EvalReport { tile: cfg.tile, methods })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

impl EvalReport {
    /// One row per method: degradation integral, MoRF first-step drop,
    /// bounding-box ratio, Sensitivity-n at the smallest n and averaged over
    /// the grid, and SSIM after randomizing the last layer.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "method\tdegradation_t{}\tmorf_first_drop\tbbox_ratio\tsensitivity_first_n\tsensitivity_mean\tsanity_ssim_last_layer\n",
            self.tile
        );
        for m in &self.methods {
            let sens_first = m.sensitivity.as_ref().map(|c| c.correlation[0]);
            let sens_mean = m
                .sensitivity
                .as_ref()
                .map(|c| c.correlation.iter().sum::<f64>() / c.correlation.len() as f64);
            let sanity = m.sanity.as_ref().and_then(|p| p.get(1)).map(|p| p.mean_ssim);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.method,
                cell(m.degradation.as_ref().map(|d| d.2)),
                cell(m.degradation.as_ref().map(|d| d.0.first_step_drop())),
                cell(m.bbox_ratio),
                cell(sens_first),
                cell(sens_mean),
                cell(sanity)
            );
        }
        s
    }

    /// Per-curve CSV files and PNG charts in `dir`; returns written paths.
    pub fn write_curves(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut written = Vec::new();
        let write = |written: &mut Vec<PathBuf>, name: String, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text)?;
            written.push(p);
            Ok(())
        };
        for m in &self.methods {
            if let Some((morf, lerf, _)) = &m.degradation {
                let mut s = String::from("x,morf,lerf\n");
                for i in 0..morf.x.len() {
                    let _ = writeln!(s, "{:.6},{:.6},{:.6}", morf.x[i], morf.y[i], lerf.y[i]);
                }
                write(&mut written, format!("degradation_{}_t{}.csv", m.method, self.tile), s)?;
            }
            if let Some(c) = &m.sensitivity {
                let mut s = String::from("n,tiles,correlation\n");
                for i in 0..c.n.len() {
                    let _ = writeln!(s, "{},{},{:.6}", c.n[i], c.tiles[i], c.correlation[i]);
                }
                write(&mut written, format!("sensitivity_{}.csv", m.method), s)?;
            }
            if let Some(points) = &m.sanity {
                let mut s = String::from("depth,mean_ssim\n");
                for p in points {
                    let _ = writeln!(s, "{},{:.6}", p.depth, p.mean_ssim);
                }
                write(&mut written, format!("sanity_{}.csv", m.method), s)?;
            }
        }

        let deg: Vec<_> = self.methods.iter().filter_map(|m| m.degradation.as_ref().map(|d| (m, d))).collect();
        if !deg.is_empty() {
            let mut series = Vec::new();
            for (m, (morf, lerf, _)) in &deg {
                series.push(Series { label: &m.method, x: &morf.x, y: &morf.y, dashed: false });
                series.push(Series { label: &m.method, x: &lerf.x, y: &lerf.y, dashed: true });
            }
            let path = dir.join(format!("degradation_t{}.png", self.tile));
            let legend = line_chart(&path, &series, 480, 320)?;
            written.push(path);
            write(&mut written, format!("degradation_t{}.legend.txt", self.tile), legend)?;
        }
        let sens: Vec<_> = self.methods.iter().filter_map(|m| m.sensitivity.as_ref().map(|c| (m, c))).collect();
        if !sens.is_empty() {
            let logn: Vec<Vec<f64>> = sens.iter().map(|(_, c)| c.n.iter().map(|&n| (n as f64).ln()).collect()).collect();
            let series: Vec<Series> = sens
                .iter()
                .zip(&logn)
                .map(|((m, c), x)| Series { label: &m.method, x, y: &c.correlation, dashed: false })
                .collect();
            let path = dir.join("sensitivity.png");
            let legend = line_chart(&path, &series, 480, 320)?;
            written.push(path);
            write(&mut written, "sensitivity.legend.txt".into(), legend)?;
        }
        Ok(written)
    }
}
