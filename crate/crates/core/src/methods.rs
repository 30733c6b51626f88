//! Uniform access to every attribution method by name.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines;
use crate::bottleneck::{estimate_stats, per_sample_attribution, readout_attribution, BottleneckConfig, FeatureStats, ReadoutNet};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::{Model, Sample};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    PerSample,
    Readout,
    Random,
    Gradient,
    Saliency,
    SmoothGrad,
    IntegratedGradients,
    Occlusion8,
    Occlusion14,
    GradCam,
    GuidedBackprop,
    GuidedGradCam,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::PerSample,
        Method::Readout,
        Method::Random,
        Method::Gradient,
        Method::Saliency,
        Method::SmoothGrad,
        Method::IntegratedGradients,
        Method::Occlusion8,
        Method::Occlusion14,
        Method::GradCam,
        Method::GuidedBackprop,
        Method::GuidedGradCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PerSample => "per-sample",
            Method::Readout => "readout",
            Method::Random => "random",
            Method::Gradient => "gradient",
            Method::Saliency => "saliency",
            Method::SmoothGrad => "smoothgrad",
            Method::IntegratedGradients => "integrated-gradients",
            Method::Occlusion8 => "occlusion8",
            Method::Occlusion14 => "occlusion14",
            Method::GradCam => "grad-cam",
            Method::GuidedBackprop => "guided-backprop",
            Method::GuidedGradCam => "guided-grad-cam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown method `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Comma-separated method names.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSettings {
    /// Bottleneck position for the per-sample method.
    pub tap: String,
    pub bottleneck: BottleneckConfig,
    /// Layer whose activations Grad-CAM weighs.
    pub cam_tap: String,
    pub smoothgrad_samples: usize,
    pub smoothgrad_noise: f64,
    pub ig_steps: usize,
    pub seed: u64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            tap: "conv3".into(),
            bottleneck: BottleneckConfig::default(),
            cam_tap: "conv4".into(),
            smoothgrad_samples: 50,
            smoothgrad_noise: 0.15,
            ig_steps: 50,
            seed: 0,
        }
    }
}

/// Inputs some methods need beyond the model.
#[derive(Clone, Copy, Debug, Default)]
pub struct Resources<'a> {
    /// Statistics at `MethodSettings::tap` for this model.
    pub stats: Option<&'a FeatureStats>,
    /// Images to estimate statistics from when `stats` is absent.
    pub stats_images: Option<&'a Tensor<f32>>,
    /// Trained readout network and the statistics at its bottleneck tap.
    pub readout: Option<(&'a ReadoutNet, &'a FeatureStats)>,
}

/// Heatmaps of `method` for every sample (true label as target), in
/// sample order. Images are processed in parallel; results do not depend
/// on the thread count.
pub fn attribute_all(
    method: Method,
    model: &Model,
    samples: &[Sample],
    settings: &MethodSettings,
    res: &Resources,
) -> Result<Vec<Heatmap>> {
    let estimated;
    let stats = match (method, res.stats, res.stats_images) {
        (Method::PerSample, Some(s), _) => Some(s),
        (Method::PerSample, None, Some(imgs)) => {
            estimated = estimate_stats(model, &model.tap(&settings.tap)?, imgs)?;
            Some(&estimated)
        }
        (Method::PerSample, None, None) => {
            return Err(Error::InvalidArgument("per-sample attribution needs feature statistics".into()))
        }
        _ => None,
    };
    if method == Method::Readout && res.readout.is_none() {
        return Err(Error::InvalidArgument("readout attribution needs a trained readout network".into()));
    }
    let tap = model.tap(&settings.tap)?;
    samples
        .par_iter()
        .map(|s| {
            let seed = derive_seed(settings.seed, &[s.id as u64]);
            let (_, h, w) = model.spec().input_shape();
            let mut hm = match method {
                Method::PerSample => {
                    let cfg = settings.bottleneck.for_image(s.id);
                    per_sample_attribution(model, &tap, stats.expect("checked above"), &s.image, Some(s.label), &cfg)?.0
                }
                Method::Readout => {
                    let (net, st) = res.readout.expect("checked above");
                    readout_attribution(net, model, st, &s.image)?
                }
                Method::Random => baselines::random_attribution(h, w, seed)?,
                Method::Gradient => baselines::gradient_map(model, &s.image, s.label)?,
                Method::Saliency => baselines::saliency(model, &s.image, s.label)?,
                Method::SmoothGrad => baselines::smoothgrad(
                    model,
                    &s.image,
                    s.label,
                    settings.smoothgrad_samples,
                    settings.smoothgrad_noise,
                    seed,
                )?,
                Method::IntegratedGradients => {
                    baselines::integrated_gradients_map(model, &s.image, s.label, settings.ig_steps)?
                }
                Method::Occlusion8 => baselines::occlusion(model, &s.image, s.label, 8)?,
                Method::Occlusion14 => baselines::occlusion(model, &s.image, s.label, 14)?,
                Method::GradCam => baselines::grad_cam(model, &s.image, s.label, &settings.cam_tap)?,
                Method::GuidedBackprop => baselines::guided_backprop(model, &s.image, s.label)?,
                Method::GuidedGradCam => baselines::guided_grad_cam(model, &s.image, s.label, &settings.cam_tap)?,
            };
            hm.image_id = Some(s.id);
            if !hm.values.is_finite() {
                return Err(Error::NonFinite(format!("{method} produced non-finite values for image {}", s.id)));
            }
            Ok(hm)
        })
        .collect()
}
