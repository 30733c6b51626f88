//! Bilinear resampling with half-pixel centers (source coordinate
//! `(o + 0.5) * in / out - 0.5`, negative coordinates clamped to 0).

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn axis_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let (r0, r1) = (&src[y.lo * w..(y.lo + 1) * w], &src[y.hi * w..(y.hi + 1) * w]);
            for t in &tx {
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * t.frac;
                let bottom = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * t.frac;
                out.push(top + (bottom - top) * y.frac);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let (wy0, wy1) = (T::one() - y.frac, y.frac);
                let (wx0, wx1) = (T::one() - t.frac, t.frac);
                d[y.lo * w + t.lo] += v * wy0 * wx0;
                d[y.lo * w + t.hi] += v * wy0 * wx1;
                d[y.hi * w + t.lo] += v * wy1 * wx0;
                d[y.hi * w + t.hi] += v * wy1 * wx1;
            }
        }
    }
    dx
}
