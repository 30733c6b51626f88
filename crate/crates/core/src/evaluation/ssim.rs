use crate::error::{Error, Result};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all fully contained `window x window` patches of two
/// `h x w` grids (uniform weights, sample covariance, data range 1).
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, window: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != h * w {
        return Err(Error::shape("ssim", format!("{} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if window < 2 || window > h || window > w {
        return Err(Error::InvalidArgument(format!("window {window} does not fit {h}x{w}")));
    }
    let np = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for dy in 0..window {
                for dx in 0..window {
                    let i = (y + dy) * w + x + dx;
                    sa += a[i];
                    sb += b[i];
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for dy in 0..window {
                for dx in 0..window {
                    let i = (y + dy) * w + x + dx;
                    let (da, db) = (a[i] - ma, b[i] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let d = np - 1.0;
            let (vaa, vbb, vab) = (vaa / d, vbb / d, vab / d);
            let num = (2.0 * ma * mb + C1) * (2.0 * vab + C2);
            let den = (ma * ma + mb * mb + C1) * (vaa + vbb + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
