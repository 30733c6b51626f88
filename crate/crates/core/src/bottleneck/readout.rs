//! A small 1x1-conv network that predicts the bottleneck mask from feature
//! maps collected at several depths.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::heatmap::{kl_to_pixels, Heatmap, Units};
use crate::kernels::resize_bilinear;
use crate::network::{load_tensors, save_tensors, ForwardOptions, LayerParams, Model, Sample, ShapesDataset, TapPoint};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_from};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::layer::{information_loss_with_lambda, mix_on_tape, normalize, sample_noise};
use super::per_sample::mean_prob;
use super::stats::FeatureStats;

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutNet {
    pub read_taps: Vec<String>,
    pub bottleneck_tap: String,
    pub sigma_s: f64,
    /// Three 1x1 convolutions.
    pub layers: Vec<LayerParams<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub read_taps: Vec<String>,
    pub bottleneck_tap: String,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub beta_over_k: f64,
    pub sigma_s: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            read_taps: ["conv1", "conv2", "conv3", "conv4"].map(String::from).to_vec(),
            bottleneck_tap: "conv3".into(),
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            beta_over_k: 10.0,
            sigma_s: 1.0,
            hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_info_per_k: f64,
}

fn conv1x1(cin: usize, cout: usize, seed: u64, layer: u64) -> Result<LayerParams<f32>> {
    let mut rng = rng_from(seed, &[0x4EAD, layer]);
    let wb = (6.0 / cin as f32).sqrt();
    let bb = 1.0 / (cin as f32).sqrt();
    let w = (0..cin * cout).map(|_| rng.random_range(-wb..wb)).collect();
    let b = (0..cout).map(|_| rng.random_range(-bb..bb)).collect();
    Ok(LayerParams {
        weight: Tensor::from_vec(vec![cout, cin, 1, 1], w)?,
        bias: Tensor::from_vec(vec![cout], b)?,
    })
}

impl ReadoutNet {
    pub fn new(model: &Model, read_taps: &[String], bottleneck_tap: &str, hidden: usize, sigma_s: f64, seed: u64) -> Result<Self> {
        if read_taps.is_empty() || hidden == 0 {
            return Err(Error::InvalidArgument("readout needs at least one read tap and a hidden width".into()));
        }
        let cin: usize = read_taps
            .iter()
            .map(|t| model.tap(t).map(|p| p.shape.0))
            .sum::<Result<usize>>()?;
        let cout = model.tap(bottleneck_tap)?.shape.0;
        Ok(Self {
            read_taps: read_taps.to_vec(),
            bottleneck_tap: bottleneck_tap.to_string(),
            sigma_s,
            layers: vec![
                conv1x1(cin, hidden, seed, 0)?,
                conv1x1(hidden, hidden, seed, 1)?,
                conv1x1(hidden, cout, seed, 2)?,
            ],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|p| (tape.leaf(p.weight.clone(), trainable), tape.leaf(p.bias.clone(), trainable)))
            .collect()
    }

    fn lambda_on_tape(&self, tape: &mut Tape<f32>, params: &[(Var, Var)], input: Var) -> Result<Var> {
        let mut x = input;
        for (i, &(w, b)) in params.iter().enumerate() {
            x = tape.conv2d(x, w, b, 1, 0)?;
            if i + 1 < params.len() {
                x = tape.relu(x);
            }
        }
        let s = tape.sigmoid(x);
        tape.gaussian_blur(s, self.sigma_s)
    }

    /// Readout input (read-tap maps resized to the bottleneck grid and
    /// channel-concatenated) and the bottleneck-tap map, for `x [N,C,H,W]`.
    pub fn collect(&self, model: &Model, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let target = model.tap(&self.bottleneck_tap)?;
        let mut taps: Vec<TapPoint> = self.read_taps.iter().map(|t| model.tap(t)).collect::<Result<_>>()?;
        taps.push(target.clone());
        let mut maps = model.features_multi(x, &taps)?;
        let r = maps.pop().expect("bottleneck map collected");
        let (_, h, w) = target.shape;
        let n = x.shape()[0];
        let mut resized = Vec::with_capacity(maps.len());
        for m in &maps {
            let m = resize_bilinear(m, h, w)?;
            if m.shape()[2..] != [h, w] {
                return Err(Error::shape("readout", format!("resized map {:?} vs {h}x{w}", m.shape())));
            }
            resized.push(m);
        }
        let cin: usize = resized.iter().map(|m| m.shape()[1]).sum();
        if cin != self.in_channels() {
            return Err(Error::shape(
                "readout",
                format!("collected {cin} channels, network expects {}", self.in_channels()),
            ));
        }
        let mut data = Vec::with_capacity(n * cin * h * w);
        for i in 0..n {
            for m in &resized {
                let per = m.numel() / n;
                data.extend_from_slice(&m.data()[i * per..(i + 1) * per]);
            }
        }
        Ok((Tensor::from_vec(vec![n, cin, h, w], data)?, r))
    }

    /// Predicted `lambda [N,c,h,w]` for a collected input.
    pub fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let l = self.lambda_on_tape(&mut tape, &params, x)?;
        Ok(tape.value(l).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut t = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            t.push((format!("readout.conv{}.weight", i + 1), p.weight.clone()));
            t.push((format!("readout.conv{}.bias", i + 1), p.bias.clone()));
        }
        for (i, name) in self.read_taps.iter().enumerate() {
            t.push((format!("meta.read.{name}"), Tensor::scalar(i as f32)));
        }
        t.push((format!("meta.bottleneck.{}", self.bottleneck_tap), Tensor::scalar(0.0)));
        t.push(("meta.sigma_s".into(), Tensor::scalar(self.sigma_s as f32)));
        save_tensors(path, &t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut layers: Vec<(usize, bool, Tensor<f32>)> = Vec::new();
        let mut reads: Vec<(f32, String)> = Vec::new();
        let mut bottleneck = None;
        let mut sigma_s = None;
        for (name, t) in load_tensors(path)? {
            if let Some(rest) = name.strip_prefix("readout.conv") {
                let (idx, kind) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Format(format!("bad readout tensor `{name}`")))?;
                let idx: usize = idx.parse().map_err(|_| Error::Format(format!("bad readout tensor `{name}`")))?;
                layers.push((idx, kind == "weight", t));
            } else if let Some(tap) = name.strip_prefix("meta.read.") {
                reads.push((t.item()?, tap.to_string()));
            } else if let Some(tap) = name.strip_prefix("meta.bottleneck.") {
                bottleneck = Some(tap.to_string());
            } else if name == "meta.sigma_s" {
                sigma_s = Some(t.item()? as f64);
            } else {
                return Err(Error::Format(format!("unexpected tensor `{name}` in readout archive")));
            }
        }
        reads.sort_by(|a, b| a.0.total_cmp(&b.0));
        layers.sort_by_key(|(i, w, _)| (*i, !*w));
        let mut params = Vec::new();
        for pair in layers.chunks(2) {
            match pair {
                [(i, true, w), (j, false, b)] if i == j => params.push(LayerParams {
                    weight: w.clone(),
                    bias: b.clone(),
                }),
                _ => return Err(Error::Format("readout archive has unpaired weights".into())),
            }
        }
        if params.len() != 3 {
            return Err(Error::Format(format!("readout archive has {} layers, expected 3", params.len())));
        }
        Ok(Self {
            read_taps: reads.into_iter().map(|(_, n)| n).collect(),
            bottleneck_tap: bottleneck.ok_or_else(|| Error::Format("readout archive lacks its bottleneck tap".into()))?,
            sigma_s: sigma_s.ok_or_else(|| Error::Format("readout archive lacks sigma_s".into()))?,
            layers: params,
        })
    }
}

/// Fit a [`ReadoutNet`] on `samples` with the classifier frozen.
pub fn train_readout(
    model: &Model,
    stats: &FeatureStats,
    samples: &[Sample],
    cfg: &ReadoutConfig,
) -> Result<(ReadoutNet, Vec<ReadoutEpoch>)> {
    if samples.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "readout training needs samples, a batch size and a positive learning rate".into(),
        ));
    }
    let tap = model.tap(&cfg.bottleneck_tap)?;
    stats.check_tap(&tap)?;
    let mut net = ReadoutNet::new(model, &cfg.read_taps, &cfg.bottleneck_tap, cfg.hidden, cfg.sigma_s, cfg.seed)?;
    let k = tap.numel() as f64;
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_from(cfg.seed, &[0x5EAD, epoch as u64]));
        let (mut loss_sum, mut info_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = ShapesDataset::batch(chunk.iter().map(|&i| &samples[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let n = labels.len();
            let (input, r) = net.collect(model, &x)?;
            let eps = sample_noise(stats, n, derive_seed(cfg.seed, &[epoch as u64, bi as u64]));

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let params = net.bind(&mut tape, true);
            let iv = tape.constant(input);
            let lambda = net.lambda_on_tape(&mut tape, &params, iv)?;
            let rn = tape.constant(normalize(&r, stats)?);
            let rv = tape.constant(r);
            let ev = tape.constant(eps);
            let z = mix_on_tape(&mut tape, rv, lambda, ev)?;
            let logits = model.forward_from_tap(&mut tape, &bound, z, &tap, ForwardOptions::default())?;
            let ce = tape.cross_entropy(logits, &labels)?;
            let kl = tape.gaussian_kl(lambda, rn)?;
            let info = tape.sum(kl);
            let info_value = tape.value(info).item()? as f64 / n as f64;
            let weighted = tape.scale(info, (cfg.beta_over_k / k / n as f64) as f32);
            let loss = tape.add(ce, weighted)?;
            let lv = tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("readout loss became {lv} at epoch {epoch}, batch {bi}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = params
                .iter()
                .flat_map(|&(w, b)| [tape.grad(w).cloned(), tape.grad(b).cloned()])
                .collect();
            let mut ps: Vec<&mut Tensor<f32>> = net
                .layers
                .iter_mut()
                .flat_map(|p| [&mut p.weight, &mut p.bias])
                .collect();
            let grefs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
            adam.step(&mut ps, &grefs);
            loss_sum += lv;
            info_sum += info_value / k;
            batches += 1;
        }
        log.push(ReadoutEpoch {
            epoch,
            mean_loss: loss_sum / batches as f64,
            mean_info_per_k: info_sum / batches as f64,
        });
    }
    Ok((net, log))
}

/// Heatmap for `image [C,H,W]` from a single collect pass and the readout
/// prediction; deterministic.
pub fn readout_attribution(net: &ReadoutNet, model: &Model, stats: &FeatureStats, image: &Tensor<f32>) -> Result<Heatmap> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let (input, r) = net.collect(model, &image.reshape(shape)?)?;
    let lambda = net.predict(&input)?.reshape(stats.shape().to_vec())?;
    let (_, kl) = information_loss_with_lambda(&r.reshape(stats.shape().to_vec())?, stats, &lambda)?;
    let (_, h, w) = model.spec().input_shape();
    let mut hm = Heatmap::new(kl_to_pixels(&kl, h, w)?, "readout", Units::Bits)?;
    hm.tap = Some(net.bottleneck_tap.clone());
    Ok(hm)
}

/// Mean true-class probability with the readout bottleneck inserted, one
/// noise draw per sample.
pub fn readout_class_prob(net: &ReadoutNet, model: &Model, stats: &FeatureStats, samples: &[Sample], seed: u64) -> Result<f64> {
    let tap = model.tap(&net.bottleneck_tap)?;
    let mut total = 0.0;
    for (bi, chunk) in samples.chunks(64).enumerate() {
        let x = ShapesDataset::batch(chunk)?;
        let (input, r) = net.collect(model, &x)?;
        let lambda = net.predict(&input)?;
        let eps = sample_noise(stats, chunk.len(), derive_seed(seed, &[bi as u64]));
        let z = lambda
            .zip_map(&r, |l, v| l * v)?
            .zip_map(&lambda.zip_map(&eps, |l, e| (1.0 - l) * e)?, |a, b| a + b)?;
        let logits = model.logits_from_tap(&z, &tap)?;
        let k = logits.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let row = Tensor::from_vec(vec![1, k], logits.data()[i * k..(i + 1) * k].to_vec())?;
            total += mean_prob(&row, s.label);
        }
    }
    Ok(total / samples.len() as f64)
}
