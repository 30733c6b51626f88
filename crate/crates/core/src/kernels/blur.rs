//! Separable Gaussian blur with reflect padding.

use crate::real::Real;

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`. `sigma == 0`
/// gives the identity kernel `[1]`.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return vec![T::one()];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// One blur pass along an axis of length `len` with element stride `step`,
/// for `lines` independent lines starting at `starts`.
fn pass<T: Real>(
    src: &[T],
    dst: &mut [T],
    kernel: &[T],
    len: usize,
    step: usize,
    starts: impl Iterator<Item = usize>,
    adjoint: bool,
) {
    let r = (kernel.len() / 2) as isize;
    for s in starts {
        for o in 0..len {
            for (t, &k) in kernel.iter().enumerate() {
                let i = reflect(o as isize + t as isize - r, len);
                if adjoint {
                    dst[s + i * step] += k * src[s + o * step];
                } else {
                    dst[s + o * step] += k * src[s + i * step];
                }
            }
        }
    }
}

fn row_starts(planes: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    (0..planes).flat_map(move |p| (0..h).map(move |y| p * h * w + y * w))
}

fn col_starts(planes: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    (0..planes).flat_map(move |p| (0..w).map(move |x| p * h * w + x))
}

/// Blur every `h x w` plane of `x` (laid out as `planes` consecutive planes).
pub(crate) fn blur_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    if kernel.len() == 1 {
        return x.iter().map(|&v| v * kernel[0]).collect();
    }
    let mut tmp = vec![T::zero(); x.len()];
    pass(x, &mut tmp, kernel, w, 1, row_starts(planes, h, w), false);
    let mut out = vec![T::zero(); x.len()];
    pass(&tmp, &mut out, kernel, h, w, col_starts(planes, h, w), false);
    out
}

pub(crate) fn blur_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    if kernel.len() == 1 {
        return dy.iter().map(|&v| v * kernel[0]).collect();
    }
    let mut tmp = vec![T::zero(); dy.len()];
    pass(dy, &mut tmp, kernel, h, w, col_starts(planes, h, w), true);
    let mut dx = vec![T::zero(); dy.len()];
    pass(&tmp, &mut dx, kernel, w, 1, row_starts(planes, h, w), true);
    dx
}
