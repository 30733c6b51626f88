use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{load_tensors, save_tensors, Model, TapPoint};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower bound applied to every estimated standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Per-element mean and standard deviation of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats<T: Real = f32> {
    /// `[c, h, w]`
    pub mu: Tensor<T>,
    /// `[c, h, w]`, at least [`SIGMA_FLOOR`].
    pub sigma: Tensor<T>,
    /// Maps the estimate was built from (0 when loaded from disk).
    pub n_samples: usize,
}

/// Single-pass mean / unbiased variance accumulator.
#[derive(Clone, Debug)]
pub struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push<T: Real>(&mut self, x: &[T]) {
        assert_eq!(x.len(), self.mean.len(), "sample length");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let v = v.as_f64();
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(mean, std)` with std floored at [`SIGMA_FLOOR`]. Needs two samples.
    pub fn finish<T: Real>(&self, shape: &[usize]) -> Result<FeatureStats<T>> {
        if self.count < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 feature maps to estimate statistics, got {}",
                self.count
            )));
        }
        let denom = (self.count - 1) as f64;
        let mu = self.mean.iter().map(|&m| T::lit(m)).collect();
        let sigma = self
            .m2
            .iter()
            .map(|&s| T::lit((s / denom).sqrt().max(SIGMA_FLOOR)))
            .collect();
        Ok(FeatureStats {
            mu: Tensor::from_vec(shape.to_vec(), mu)?,
            sigma: Tensor::from_vec(shape.to_vec(), sigma)?,
            n_samples: self.count,
        })
    }
}

impl<T: Real> FeatureStats<T> {
    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn check_tap(&self, tap: &TapPoint) -> Result<()> {
        let (c, h, w) = tap.shape;
        if self.mu.shape() != [c, h, w] {
            return Err(Error::shape(
                "stats",
                format!("statistics {:?} do not match tap `{}` {:?}", self.mu.shape(), tap.name, tap.shape),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FeatureStats<U> {
        FeatureStats {
            mu: self.mu.cast(),
            sigma: self.sigma.cast(),
            n_samples: self.n_samples,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = Tensor::from_vec(vec![1], vec![self.n_samples as f32])?;
        save_tensors(
            path,
            &[("mu".into(), self.mu.cast()), ("sigma".into(), self.sigma.cast()), ("n".into(), n)],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut mu = None;
        let mut sigma = None;
        let mut n_samples = 0;
        for (name, t) in load_tensors(path)? {
            match name.as_str() {
                "mu" => mu = Some(t),
                "sigma" => sigma = Some(t),
                "n" if t.numel() == 1 => n_samples = t.data()[0] as usize,
                other => return Err(Error::Format(format!("unexpected tensor `{other}` in statistics archive"))),
            }
        }
        let (Some(mu), Some(sigma)) = (mu, sigma) else {
            return Err(Error::Format("statistics archive needs `mu` and `sigma`".into()));
        };
        if mu.shape() != sigma.shape() || mu.rank() != 3 {
            return Err(Error::Format(format!(
                "mu {:?} and sigma {:?} must share a [c,h,w] shape",
                mu.shape(),
                sigma.shape()
            )));
        }
        Ok(Self {
            mu: mu.cast(),
            sigma: sigma.cast(),
            n_samples,
        })
    }
}

/// Mean and std of the feature map at `tap` over `images [M,C,H,W]`.
pub fn estimate_stats<T: Real>(model: &Model<T>, tap: &TapPoint, images: &Tensor<T>) -> Result<FeatureStats<T>> {
    let m = images.shape()[0];
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 images to estimate statistics, got {m}"
        )));
    }
    let (c, h, w) = tap.shape;
    let mut acc = Welford::new(c * h * w);
    let per = images.numel() / m;
    for start in (0..m).step_by(128) {
        let end = (start + 128).min(m);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_vec(shape, images.data()[start * per..end * per].to_vec())?;
        let feats = model.features(&chunk, tap)?;
        for map in feats.data().chunks(c * h * w) {
            acc.push(map);
        }
    }
    acc.finish(&[c, h, w])
}
