//! Reference attribution methods.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Units};
use crate::kernels::resize_bilinear;
use crate::network::{ForwardOptions, Model};
use crate::real::Real;
use crate::rng::rng_from;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn relevance(values: Tensor<f32>, method: &str) -> Result<Heatmap> {
    Heatmap::new(values, method, Units::Relevance)
}

fn with_batch<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshape(shape)
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("attribution", format!("need an image [C,H,W], got {:?}", image.shape()))),
    }
}

/// Uniform `[0,1)` noise per pixel.
pub fn random_attribution(height: usize, width: usize, seed: u64) -> Result<Heatmap> {
    let mut rng = rng_from(seed, &[0x4A4D]);
    let data = (0..height * width).map(|_| rng.random::<f32>()).collect();
    relevance(Tensor::from_vec(vec![height, width], data)?, "random")
}

/// `d logit[target_i] / d x_i` for a batch `x [N,C,H,W]`.
pub fn input_gradient<T: Real>(model: &Model<T>, x: &Tensor<T>, targets: &[usize], opts: ForwardOptions) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.param(x.clone());
    let logits = model.forward(&mut tape, &bound, xv, opts)?;
    let picked = tape.gather(logits, targets)?;
    let total = tape.sum(picked);
    tape.backward(total)?;
    Ok(tape.grad(xv).cloned().unwrap_or_else(|| x.zeros_like()))
}

/// Reduce `[C,H,W]` over channels.
fn reduce_channels(g: &[f32], c: usize, plane: usize, f: impl Fn(f32, f32) -> f32, init: f32) -> Vec<f32> {
    (0..plane)
        .map(|p| (0..c).fold(init, |acc, ch| f(acc, g[ch * plane + p])))
        .collect()
}

/// Signed input gradient of the target logit, summed over channels.
pub fn gradient_map(model: &Model, image: &Tensor<f32>, target: usize) -> Result<Heatmap> {
    let (c, h, w) = image_dims(image)?;
    let g = input_gradient(model, &with_batch(image)?, &[target], ForwardOptions::default())?;
    let m = reduce_channels(g.data(), c, h * w, |a, v| a + v, 0.0);
    relevance(Tensor::from_vec(vec![h, w], m)?, "gradient")
}

/// Maximum absolute input gradient over channels.
pub fn saliency(model: &Model, image: &Tensor<f32>, target: usize) -> Result<Heatmap> {
    let (c, h, w) = image_dims(image)?;
    let g = input_gradient(model, &with_batch(image)?, &[target], ForwardOptions::default())?;
    let m = reduce_channels(g.data(), c, h * w, |a, v| a.max(v.abs()), 0.0);
    relevance(Tensor::from_vec(vec![h, w], m)?, "saliency")
}

/// Mean saliency over `n` copies perturbed with Gaussian noise of std
/// `noise_frac * (max - min)` of the image.
pub fn smoothgrad(model: &Model, image: &Tensor<f32>, target: usize, n: usize, noise_frac: f64, seed: u64) -> Result<Heatmap> {
    let (c, h, w) = image_dims(image)?;
    if n == 0 {
        return Err(Error::InvalidArgument("smoothgrad needs n >= 1".into()));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let std = noise_frac * (hi - lo) as f64;
    let mut rng = rng_from(seed, &[0x5600]);
    let mut acc = vec![0f32; h * w];
    for start in (0..n).step_by(16) {
        let count = (n - start).min(16);
        let mut data = Vec::with_capacity(count * image.numel());
        for _ in 0..count {
            for &v in image.data() {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(v + (std * z) as f32);
            }
        }
        let x = Tensor::from_vec(vec![count, c, h, w], data)?;
        let g = input_gradient(model, &x, &vec![target; count], ForwardOptions::default())?;
        for gi in g.data().chunks(c * h * w) {
            let s = reduce_channels(gi, c, h * w, |a, v| a.max(v.abs()), 0.0);
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
    }
    let m = acc.into_iter().map(|v| v / n as f32).collect();
    relevance(Tensor::from_vec(vec![h, w], m)?, "smoothgrad")
}

/// `(x - baseline)` times the mean gradient along the straight path
/// (midpoint rule with `steps` points), summed over channels.
pub fn integrated_gradients<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    target: usize,
    steps: usize,
    baseline: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs steps >= 1".into()));
    }
    let zeros = image.zeros_like();
    let base = baseline.unwrap_or(&zeros);
    if base.shape() != image.shape() {
        return Err(Error::shape("integrated_gradients", format!("baseline {:?}", base.shape())));
    }
    let mut mean_grad = vec![T::zero(); image.numel()];
    for start in (0..steps).step_by(16) {
        let count = (steps - start).min(16);
        let mut data = Vec::with_capacity(count * image.numel());
        for s in start..start + count {
            let a = T::lit((s as f64 + 0.5) / steps as f64);
            data.extend(image.data().iter().zip(base.data()).map(|(&x, &b)| b + a * (x - b)));
        }
        let x = Tensor::from_vec(vec![count, c, h, w], data)?;
        let g = input_gradient(model, &x, &vec![target; count], ForwardOptions::default())?;
        for gi in g.data().chunks(image.numel()) {
            for (m, &v) in mean_grad.iter_mut().zip(gi) {
                *m += v;
            }
        }
    }
    let scale = T::lit(1.0 / steps as f64);
    let plane = h * w;
    let mut out = vec![T::zero(); plane];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            out[p] += (image.data()[i] - base.data()[i]) * mean_grad[i] * scale;
        }
    }
    Tensor::from_vec(vec![h, w], out)
}

pub fn integrated_gradients_map(model: &Model, image: &Tensor<f32>, target: usize, steps: usize) -> Result<Heatmap> {
    relevance(integrated_gradients(model, image, target, steps, None)?, "integrated-gradients")
}

/// Drop in the target logit when each `patch x patch` block (stride
/// `patch`, clipped at the border) is set to zero; every pixel of a block
/// receives its block's drop.
pub fn occlusion(model: &Model, image: &Tensor<f32>, target: usize, patch: usize) -> Result<Heatmap> {
    let (c, h, w) = image_dims(image)?;
    if patch == 0 || patch > h.min(w) {
        return Err(Error::InvalidArgument(format!("patch {patch} does not fit a {h}x{w} image")));
    }
    let k = model.spec().classes();
    let base = model.logits(&with_batch(image)?)?.data()[target];
    let mut blocks = Vec::new();
    for y in (0..h).step_by(patch) {
        for x in (0..w).step_by(patch) {
            blocks.push((y, x, (y + patch).min(h), (x + patch).min(w)));
        }
    }
    let mut data = Vec::with_capacity(blocks.len() * image.numel());
    for &(y0, x0, y1, x1) in &blocks {
        let mut img = image.data().to_vec();
        for ch in 0..c {
            for y in y0..y1 {
                img[ch * h * w + y * w + x0..ch * h * w + y * w + x1].fill(0.0);
            }
        }
        data.extend(img);
    }
    let logits = model.logits(&Tensor::from_vec(vec![blocks.len(), c, h, w], data)?)?;
    let mut m = vec![0f32; h * w];
    for (i, &(y0, x0, y1, x1)) in blocks.iter().enumerate() {
        let drop = base - logits.data()[i * k + target];
        for y in y0..y1 {
            m[y * w + x0..y * w + x1].fill(drop);
        }
    }
    relevance(Tensor::from_vec(vec![h, w], m)?, &format!("occlusion{patch}"))
}

/// Class-weighted activation map at `tap` (ReLU of the gradient-weighted
/// channel sum), resized to the image.
pub fn grad_cam(model: &Model, image: &Tensor<f32>, target: usize, tap: &str) -> Result<Heatmap> {
    let (_, h, w) = image_dims(image)?;
    let tp = model.tap(tap)?;
    let (c, fh, fw) = tp.shape;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let acts = model.features(&with_batch(image)?, &tp)?;
    let av = tape.param(acts.clone());
    let logits = model.forward_from_tap(&mut tape, &bound, av, &tp, ForwardOptions::default())?;
    let picked = tape.gather(logits, &[target])?;
    let total = tape.sum(picked);
    tape.backward(total)?;
    let g = tape.grad(av).cloned().unwrap_or_else(|| acts.zeros_like());
    let plane = fh * fw;
    let mut cam = vec![0f32; plane];
    for ch in 0..c {
        let gs = &g.data()[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().sum::<f32>() / plane as f32;
        for (o, &a) in cam.iter_mut().zip(&acts.data()[ch * plane..(ch + 1) * plane]) {
            *o += weight * a;
        }
    }
    let cam: Vec<f32> = cam.into_iter().map(|v| v.max(0.0)).collect();
    let up = resize_bilinear(&Tensor::from_vec(vec![1, 1, fh, fw], cam)?, h, w)?;
    relevance(up.reshape(vec![h, w])?, "grad-cam")
}

/// Input gradient where every ReLU also blocks negative incoming
/// gradients; summed over channels.
pub fn guided_backprop(model: &Model, image: &Tensor<f32>, target: usize) -> Result<Heatmap> {
    let (c, h, w) = image_dims(image)?;
    let g = input_gradient(model, &with_batch(image)?, &[target], ForwardOptions { guided_relu: true })?;
    let m = reduce_channels(g.data(), c, h * w, |a, v| a + v, 0.0);
    relevance(Tensor::from_vec(vec![h, w], m)?, "guided-backprop")
}

/// Rescale to `[0,1]`; a constant map becomes all zeros.
pub fn min_max_normalize(values: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = values
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        values.map(|v| (v - lo) / (hi - lo))
    } else {
        values.map(|_| 0.0)
    }
}

/// Product of min-max normalized guided backprop and Grad-CAM maps.
pub fn guided_grad_cam(model: &Model, image: &Tensor<f32>, target: usize, tap: &str) -> Result<Heatmap> {
    let gb = min_max_normalize(&guided_backprop(model, image, target)?.values);
    let cam = min_max_normalize(&grad_cam(model, image, target, tap)?.values);
    relevance(gb.zip_map(&cam, |a, b| a * b)?, "guided-grad-cam")
}
