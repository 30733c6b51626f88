use crate::error::{Error, Result};
use crate::real::Real;

/// Non-overlapping max pooling (kernel == stride == `size`). Returns the
/// pooled values and, per output element, the flat input index it came from.
/// Ties go to the lowest flat index.
pub(crate) fn maxpool2d_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    size: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let (n, c, h, w) = crate::tensor::dims4(shape, "maxpool2d")?;
    if size == 0 || size > h || size > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("pool size {size} does not fit {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * size + ky) * w + ox * size + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
                out.push(x[best]);
            }
        }
    }
    Ok((vec![n, c, ho, wo], out, argmax))
}

pub(crate) fn maxpool2d_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest_index() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (shape, out, arg) = maxpool2d_forward(&x, &[1, 1, 2, 2], 2).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1]);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_sizes_floor() {
        let x: Vec<f32> = (0..15).map(|v| v as f32).collect();
        let (shape, out, _) = maxpool2d_forward(&x, &[1, 1, 3, 5], 2).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 2]);
        assert_eq!(out, vec![6.0, 8.0]);
    }
}
