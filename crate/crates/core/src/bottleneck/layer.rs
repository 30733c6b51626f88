//! The noise-injection layer and its information cost.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{normal_like, rng_from};
use crate::tape::{gaussian_kl_value, Tape, Var};
use crate::tensor::Tensor;

use super::stats::FeatureStats;

/// `alpha = 5` gives `lambda ~= 0.993`, i.e. nearly all information passes.
pub const ALPHA_INIT: f64 = 5.0;

/// Unconstrained mask parameters; `lambda = blur(sigma_s, sigmoid(alpha))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask<T: Real = f32> {
    /// `[c, h, w]`
    pub alpha: Tensor<T>,
    pub sigma_s: f64,
}

impl<T: Real> AlphaMask<T> {
    pub fn new(shape: &[usize], init: f64, sigma_s: f64) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::shape("alpha_mask", format!("need [c,h,w], got {shape:?}")));
        }
        if !(sigma_s >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_s must be >= 0, got {sigma_s}")));
        }
        Ok(Self {
            alpha: Tensor::full(shape.to_vec(), T::lit(init))?,
            sigma_s,
        })
    }

    /// Derived `lambda`, `[c, h, w]`.
    pub fn lambda(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let a = tape.constant(self.alpha.clone());
        let l = lambda_on_tape(&mut tape, a, self.sigma_s)?;
        tape.value(l).reshape(self.alpha.shape().to_vec())
    }
}

/// `blur(sigma_s, sigmoid(alpha))` for `alpha` of shape `[c,h,w]` (result
/// `[1,c,h,w]`) or `[N,c,h,w]`.
pub fn lambda_on_tape<T: Real>(tape: &mut Tape<T>, alpha: Var, sigma_s: f64) -> Result<Var> {
    let a = match tape.shape(alpha).to_vec()[..] {
        [c, h, w] => tape.reshape(alpha, &[1, c, h, w])?,
        [_, _, _, _] => alpha,
        ref s => return Err(Error::shape("lambda", format!("need [c,h,w] or [N,c,h,w], got {s:?}"))),
    };
    let s = tape.sigmoid(a);
    tape.gaussian_blur(s, sigma_s)
}

fn broadcast<T: Real>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let mut shape = vec![n];
    shape.extend_from_slice(t.shape());
    Tensor::from_vec(shape, t.data().repeat(n))
}

fn batch_of<T: Real>(r: &[usize], stats: &FeatureStats<T>, op: &'static str) -> Result<usize> {
    let s = stats.shape();
    match r {
        [n, rest @ ..] if rest == s => Ok(*n),
        rest if rest == s => Ok(1),
        _ => Err(Error::shape(op, format!("feature map {r:?} vs statistics {s:?}"))),
    }
}

/// `eps ~ N(mu, sigma^2)` per element, `copies` maps stacked, from `seed`.
pub fn sample_noise<T: Real>(stats: &FeatureStats<T>, copies: usize, seed: u64) -> Tensor<T> {
    normal_like(&stats.mu, &stats.sigma, copies, &mut rng_from(seed, &[0xE95]))
}

/// `Z = lambda * R + (1 - lambda) * eps` with `eps` drawn from `seed`.
/// `r` is `[c,h,w]` or `[N,c,h,w]`; the mask is shared across the batch.
pub fn bottleneck_forward<T: Real>(
    r: &Tensor<T>,
    stats: &FeatureStats<T>,
    mask: &AlphaMask<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let n = batch_of(r.shape(), stats, "bottleneck_forward")?;
    let lambda = mask.lambda()?;
    if lambda.shape() != stats.shape() {
        return Err(Error::shape(
            "bottleneck_forward",
            format!("mask {:?} vs statistics {:?}", lambda.shape(), stats.shape()),
        ));
    }
    let eps = sample_noise(stats, n, seed);
    let per = lambda.numel();
    let data = r
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let l = lambda.data()[i % per];
            l * x + (T::one() - l) * e
        })
        .collect();
    Tensor::from_vec(r.shape().to_vec(), data)
}

/// Closed-form information cost of the mask at `r` (`[c,h,w]`): the total in
/// nats and the per-element KL map.
pub fn information_loss<T: Real>(
    r: &Tensor<T>,
    stats: &FeatureStats<T>,
    mask: &AlphaMask<T>,
) -> Result<(T, Tensor<T>)> {
    if r.shape() != stats.shape() {
        return Err(Error::shape(
            "information_loss",
            format!("feature map {:?} vs statistics {:?}", r.shape(), stats.shape()),
        ));
    }
    let lambda = mask.lambda()?;
    information_loss_with_lambda(r, stats, &lambda)
}

/// [`information_loss`] for an explicit `lambda` of the same shape as `r`.
pub fn information_loss_with_lambda<T: Real>(
    r: &Tensor<T>,
    stats: &FeatureStats<T>,
    lambda: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let rn = normalize(r, stats)?;
    let kl = lambda.zip_map(&rn, gaussian_kl_value)?;
    Ok((kl.sum(), kl))
}

/// `(r - mu) / sigma`, broadcasting over a leading batch dim.
pub fn normalize<T: Real>(r: &Tensor<T>, stats: &FeatureStats<T>) -> Result<Tensor<T>> {
    batch_of(r.shape(), stats, "normalize")?;
    let per = stats.mu.numel();
    let data = r
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - stats.mu.data()[i % per]) / stats.sigma.data()[i % per])
        .collect();
    Tensor::from_vec(r.shape().to_vec(), data)
}

/// Tape version of [`normalize`] for `r` of shape `[N,c,h,w]`.
pub fn normalize_on_tape<T: Real>(tape: &mut Tape<T>, r: Var, stats: &FeatureStats<T>) -> Result<Var> {
    let n = batch_of(tape.shape(r), stats, "normalize")?;
    if !tape.requires_grad(r) {
        let v = normalize(tape.value(r), stats)?;
        return Ok(tape.constant(v));
    }
    let mu = tape.constant(broadcast(&stats.mu, n)?);
    let inv = tape.constant(broadcast(&stats.sigma.map(|s| T::one() / s), n)?);
    let centered = tape.sub(r, mu)?;
    tape.mul(centered, inv)
}

/// `Z = eps + lambda * (R - eps)` on the tape. `lambda` may have a leading
/// dim of 1, in which case it is repeated over the batch of `r`.
pub fn mix_on_tape<T: Real>(tape: &mut Tape<T>, r: Var, lambda: Var, eps: Var) -> Result<Var> {
    let n = tape.shape(r)[0];
    let lambda = if tape.shape(lambda)[0] == 1 && n > 1 {
        tape.repeat_batch(lambda, n)?
    } else {
        lambda
    };
    let diff = tape.sub(r, eps)?;
    let kept = tape.mul(lambda, diff)?;
    tape.add(eps, kept)
}
