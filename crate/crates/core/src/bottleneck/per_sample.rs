//! Per-image optimization of the bottleneck mask.

use crate::error::{Error, Result};
use crate::heatmap::{kl_to_pixels, Heatmap, Units};
use crate::network::{argmax, ForwardOptions, Model, TapPoint};
use crate::optim::Adam;
use crate::real::Real;
use crate::rng::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::layer::{information_loss_with_lambda, lambda_on_tape, mix_on_tape, normalize, sample_noise, AlphaMask, ALPHA_INIT};
use super::stats::FeatureStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// The supplied label, falling back to the prediction when absent.
    TrueLabel,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    /// `beta * k`; the loss weight on the information term is this over `k`.
    pub beta_over_k: f64,
    pub iterations: usize,
    /// Noisy copies of the image per step.
    pub copies: usize,
    pub lr: f64,
    pub sigma_s: f64,
    pub target: TargetMode,
    pub seed: u64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            beta_over_k: 10.0,
            iterations: 10,
            copies: 10,
            lr: 1.0,
            sigma_s: 1.0,
            target: TargetMode::TrueLabel,
            seed: 0,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.copies == 0 {
            return Err(Error::InvalidArgument("iterations and copies must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.beta_over_k >= 0.0) || !self.beta_over_k.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta_over_k)));
        }
        if !(self.sigma_s >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_s must be >= 0, got {}", self.sigma_s)));
        }
        Ok(())
    }

    /// Same settings with the seed mixed with `image_id`, so fits of
    /// different images draw independent noise.
    pub fn for_image(&self, image_id: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, &[image_id as u64]),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitDiagnostics {
    pub target: usize,
    /// Objective value at every completed step.
    pub losses: Vec<f64>,
    /// Mean target probability through the bottleneck at `alpha = 5`.
    pub initial_prob: f64,
    /// Mean target probability through the fitted bottleneck.
    pub final_prob: f64,
    /// Total information of the fitted mask, nats.
    pub info_nats: f64,
    /// `info_nats / k`.
    pub info_per_k: f64,
    /// Fitted `lambda`, `[c,h,w]`.
    pub lambda: Tensor<f32>,
    /// A step produced a non-finite loss; the last finite mask was kept.
    pub stopped_early: bool,
}

/// Value and alpha-gradient of `CE + (beta_over_k / k) * L_I` for the
/// feature map `r [1,c,h,w]`, noise `eps [B,c,h,w]` and `target`.
pub fn per_sample_objective<T: Real>(
    model: &Model<T>,
    tap: &TapPoint,
    stats: &FeatureStats<T>,
    r: &Tensor<T>,
    alpha: &AlphaMask<T>,
    eps: &Tensor<T>,
    target: usize,
    beta_over_k: f64,
) -> Result<(T, Tensor<T>)> {
    let copies = eps.shape()[0];
    let k = tap.numel();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let a = tape.param(alpha.alpha.clone());
    let lambda = lambda_on_tape(&mut tape, a, alpha.sigma_s)?;
    let rv = tape.constant(r.clone());
    let rb = tape.repeat_batch(rv, copies)?;
    let ev = tape.constant(eps.clone());
    let z = mix_on_tape(&mut tape, rb, lambda, ev)?;
    let logits = model.forward_from_tap(&mut tape, &bound, z, tap, ForwardOptions::default())?;
    let ce = tape.cross_entropy(logits, &vec![target; copies])?;
    let rn = tape.constant(normalize(r, stats)?);
    let kl = tape.gaussian_kl(lambda, rn)?;
    let info = tape.sum(kl);
    let weighted = tape.scale(info, T::lit(beta_over_k / k as f64));
    let loss = tape.add(ce, weighted)?;
    tape.backward(loss)?;
    let grad = tape
        .grad(a)
        .cloned()
        .unwrap_or_else(|| alpha.alpha.zeros_like());
    Ok((tape.value(loss).item()?, grad))
}

/// Mean softmax probability of `target` over `eps.len()` noisy copies.
fn bottleneck_prob<T: Real>(
    model: &Model<T>,
    tap: &TapPoint,
    r: &Tensor<T>,
    lambda: &Tensor<T>,
    eps: &Tensor<T>,
    target: usize,
) -> Result<f64> {
    let per = lambda.numel();
    let z: Vec<T> = eps
        .data()
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let l = lambda.data()[i % per];
            l * r.data()[i % per] + (T::one() - l) * e
        })
        .collect();
    let z = Tensor::from_vec(eps.shape().to_vec(), z)?;
    let logits = model.logits_from_tap(&z, tap)?;
    Ok(mean_prob(&logits, target))
}

pub(crate) fn mean_prob<T: Real>(logits: &Tensor<T>, target: usize) -> f64 {
    let k = logits.shape()[1];
    let rows = logits.data().chunks(k);
    let n = rows.len();
    rows.map(|row| {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let total: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        (row[target].as_f64() - max).exp() / total
    })
    .sum::<f64>()
        / n as f64
}

/// Fitted mask and per-element information for one image.
#[derive(Clone, Debug)]
pub struct MaskFit<T: Real> {
    pub mask: AlphaMask<T>,
    /// Per-element KL, nats, `[c,h,w]`.
    pub kl: Tensor<T>,
    pub diagnostics: FitDiagnostics,
}

/// Optimize the mask for `image [C,H,W]`. Generic so it can run in f64.
pub fn fit_mask<T: Real>(
    model: &Model<T>,
    tap: &TapPoint,
    stats: &FeatureStats<T>,
    image: &Tensor<T>,
    label: Option<usize>,
    cfg: &BottleneckConfig,
) -> Result<MaskFit<T>> {
    cfg.validate()?;
    stats.check_tap(tap)?;
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.reshape(shape)?;
    let r = model.features(&x, tap)?;
    let classes = model.spec().classes();
    let target = match (cfg.target, label) {
        (TargetMode::TrueLabel, Some(l)) => l,
        _ => {
            let logits: Vec<f32> = model.logits_from_tap(&r, tap)?.data().iter().map(|v| v.as_f64() as f32).collect();
            argmax(&logits)
        }
    };
    if target >= classes {
        return Err(Error::InvalidArgument(format!("target {target} out of range for {classes} classes")));
    }

    let mut mask = AlphaMask::new(stats.shape(), ALPHA_INIT, cfg.sigma_s)?;
    let eval_eps = sample_noise(stats, cfg.copies, derive_seed(cfg.seed, &[u64::MAX]));
    let initial_prob = bottleneck_prob(model, tap, &r, &mask.lambda()?, &eval_eps, target)?;

    let mut adam = Adam::new(T::lit(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut stopped_early = false;
    for step in 0..cfg.iterations {
        let eps = sample_noise(stats, cfg.copies, derive_seed(cfg.seed, &[step as u64]));
        let (loss, grad) = per_sample_objective(model, tap, stats, &r, &mask, &eps, target, cfg.beta_over_k)?;
        if !loss.is_finite() || !grad.is_finite() {
            stopped_early = true;
            break;
        }
        let before = mask.alpha.clone();
        adam.step(&mut [&mut mask.alpha], &[Some(&grad)]);
        if !mask.alpha.is_finite() {
            mask.alpha = before;
            stopped_early = true;
            break;
        }
        losses.push(loss.as_f64());
    }

    let lambda = mask.lambda()?;
    let r_chw = r.reshape(stats.shape().to_vec())?;
    let (info, kl) = information_loss_with_lambda(&r_chw, stats, &lambda)?;
    let final_prob = bottleneck_prob(model, tap, &r, &lambda, &eval_eps, target)?;
    let info_nats = info.as_f64();
    Ok(MaskFit {
        mask,
        kl,
        diagnostics: FitDiagnostics {
            target,
            losses,
            initial_prob,
            final_prob,
            info_nats,
            info_per_k: info_nats / tap.numel() as f64,
            lambda: lambda.cast(),
            stopped_early,
        },
    })
}

/// Fit a mask for `image [C,H,W]` and turn its information into a
/// bits-per-pixel heatmap at image resolution.
pub fn per_sample_attribution(
    model: &Model,
    tap: &TapPoint,
    stats: &FeatureStats,
    image: &Tensor<f32>,
    label: Option<usize>,
    cfg: &BottleneckConfig,
) -> Result<(Heatmap, FitDiagnostics)> {
    let fit = fit_mask(model, tap, stats, image, label, cfg)?;
    let (_, h, w) = model.spec().input_shape();
    let mut hm = Heatmap::new(kl_to_pixels(&fit.kl, h, w)?, "per-sample", Units::Bits)?;
    hm.tap = Some(tap.name.clone());
    hm.beta_over_k = Some(cfg.beta_over_k);
    Ok((hm, fit.diagnostics))
}
