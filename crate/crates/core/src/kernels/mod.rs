//! Raw numeric kernels behind the tape operations.

pub mod blur;
pub(crate) mod conv;
pub(crate) mod pool;
pub(crate) mod resize;

pub use blur::gaussian_kernel;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

/// Bilinear resize of every plane of `[N,C,H,W]` outside any tape.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let out = resize::resize_forward(x.data(), n * c, (h, w), (out_h, out_w));
    Tensor::from_vec(vec![n, c, out_h, out_w], out)
}

/// Gaussian blur of every plane of `[N,C,H,W]` outside any tape.
pub fn gaussian_blur<T: Real>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    let (n, c, h, w) = dims4(x.shape(), "gaussian_blur")?;
    let out = blur::blur_forward(x.data(), n * c, h, w, &gaussian_kernel::<T>(sigma));
    Tensor::from_vec(x.shape().to_vec(), out)
}
