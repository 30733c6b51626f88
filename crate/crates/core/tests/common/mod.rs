#![allow(dead_code)]

use iba_core::bottleneck::{estimate_stats, per_sample_objective, sample_noise, AlphaMask};
use iba_core::network::{build_default_model, DatasetConfig, Model, ShapesDataset};
use iba_core::tape::{gaussian_kl_value, Tape, Var};
use iba_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (for ReLU) with distinct magnitudes (for
/// max pooling), so a step of `h` never crosses a kink.
pub fn kink_free(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 + 0.01 * i as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let data = vals.into_iter().map(|v| if r.random::<bool>() { v } else { -v }).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, seed ^ 0xABCD));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Central-difference check of d loss / d inputs at `probes` random
/// coordinates. Returns the worst relative error.
pub fn fd_check<F>(inputs: &[Tensor<f64>], probes: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let h = 1e-5;
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect();

    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let which = r.random_range(0..inputs.len());
        let idx = r.random_range(0..inputs[which].numel());
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[idx] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[idx] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = grads[which].data()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

pub struct Desk {
    pub data: iba_core::network::ShapesDataset,
    pub model: iba_core::network::Model,
    pub tap: iba_core::network::TapPoint,
    pub stats: iba_core::bottleneck::FeatureStats,
}

/// The default classifier trained once per test binary on the default
/// dataset, with conv3 statistics from 1000 training images.
pub fn desk() -> &'static Desk {
    use iba_core::bottleneck::estimate_stats;
    use iba_core::network::*;
    static DESK: std::sync::OnceLock<Desk> = std::sync::OnceLock::new();
    DESK.get_or_init(|| {
        let data = ShapesDataset::generate(DatasetConfig::default()).unwrap();
        let init = Model::init(build_default_model(5).unwrap(), 1);
        let (model, _) = train(&init, &data, &TrainConfig::default()).unwrap();
        let tap = model.tap("conv3").unwrap();
        let stats = estimate_stats(&model, &tap, &ShapesDataset::batch(&data.train[..1000]).unwrap()).unwrap();
        Desk { data, model, tap, stats }
    })
}

/// Simpson's rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `KL(N(lambda r, (1-lambda)^2) || N(0, 1))` by quadrature in the
/// coordinates of the first density.
pub fn kl_quadrature(lambda: f64, r: f64) -> f64 {
    let (m, s) = (lambda * r, 1.0 - lambda);
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    simpson(
        |u| {
            let z = m + s * u;
            let ln_p = ln_norm - 0.5 * u * u - s.ln();
            let ln_q = ln_norm - 0.5 * z * z;
            (ln_norm - 0.5 * u * u).exp() * (ln_p - ln_q)
        },
        -12.0,
        12.0,
        4000,
    )
}

/// Worst finite-difference relative error of every tape op.
pub fn op_gradient_checks(probes: usize) -> Vec<(&'static str, f64)> {
    vec![
        (
            "conv2d",
            fd_check(
                &[uniform(&[2, 2, 5, 5], -1.0, 1.0, 1), uniform(&[3, 2, 3, 3], -1.0, 1.0, 2), uniform(&[3], -1.0, 1.0, 3)],
                probes,
                10,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    weighted_sum(t, y, 1)
                },
            ),
        ),
        (
            "conv2d-strided",
            fd_check(
                &[uniform(&[1, 2, 7, 6], -1.0, 1.0, 4), uniform(&[2, 2, 3, 2], -1.0, 1.0, 5), uniform(&[2], -1.0, 1.0, 6)],
                probes,
                11,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    weighted_sum(t, y, 2)
                },
            ),
        ),
        (
            "linear",
            fd_check(
                &[uniform(&[3, 5], -1.0, 1.0, 7), uniform(&[4, 5], -1.0, 1.0, 8), uniform(&[4], -1.0, 1.0, 9)],
                probes,
                12,
                |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    weighted_sum(t, y, 3)
                },
            ),
        ),
        (
            "relu",
            fd_check(&[kink_free(&[2, 3, 4], 13)], probes, 13, |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "maxpool2d",
            fd_check(&[kink_free(&[1, 2, 6, 6], 14)], probes, 14, |t, v| {
                let y = t.maxpool2d(v[0], 2)?;
                weighted_sum(t, y, 5)
            }),
        ),
        (
            "sigmoid",
            fd_check(&[uniform(&[10], -4.0, 4.0, 15)], probes, 15, |t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y, 6)
            }),
        ),
        (
            "softmax",
            fd_check(&[uniform(&[3, 4], -2.0, 2.0, 16)], probes, 16, |t, v| {
                let y = t.softmax(v[0]);
                weighted_sum(t, y, 7)
            }),
        ),
        (
            "cross_entropy",
            fd_check(&[uniform(&[4, 3], -2.0, 2.0, 17)], probes, 17, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
        (
            "add/sub/mul",
            fd_check(
                &[uniform(&[2, 3], -1.0, 1.0, 18), uniform(&[2, 3], -1.0, 1.0, 19)],
                probes,
                18,
                |t, v| {
                    let a = t.add(v[0], v[1])?;
                    let s = t.sub(v[0], v[1])?;
                    let m = t.mul(a, s)?;
                    let m = t.mul(m, v[0])?;
                    weighted_sum(t, m, 8)
                },
            ),
        ),
        (
            "scale/add_scalar/mean",
            fd_check(&[uniform(&[5], -1.0, 1.0, 20)], probes, 19, |t, v| {
                let s = t.scale(v[0], -2.5);
                let a = t.add_scalar(s, 0.7);
                let sq = t.mul(a, a)?;
                Ok(t.mean(sq))
            }),
        ),
        (
            "sum_axis",
            fd_check(&[uniform(&[2, 3, 4], -1.0, 1.0, 21)], probes, 20, |t, v| {
                let y = t.sum_axis(v[0], 1)?;
                let sq = t.mul(y, y)?;
                weighted_sum(t, sq, 9)
            }),
        ),
        (
            "log/exp",
            fd_check(&[uniform(&[6], 0.2, 2.0, 22)], probes, 21, |t, v| {
                let l = t.log(v[0]);
                let e = t.exp(v[0]);
                let m = t.mul(l, e)?;
                weighted_sum(t, m, 10)
            }),
        ),
        (
            "gaussian_blur",
            fd_check(&[uniform(&[1, 2, 9, 8], -1.0, 1.0, 23)], probes, 22, |t, v| {
                let y = t.gaussian_blur(v[0], 1.0)?;
                weighted_sum(t, y, 11)
            }),
        ),
        (
            "resize_bilinear",
            fd_check(&[uniform(&[1, 2, 5, 4], -1.0, 1.0, 24)], probes, 23, |t, v| {
                let up = t.resize_bilinear(v[0], 9, 11)?;
                let down = t.resize_bilinear(up, 3, 2)?;
                let a = weighted_sum(t, up, 12)?;
                let b = weighted_sum(t, down, 13)?;
                t.add(a, b)
            }),
        ),
        (
            "reshape/repeat_batch/gather",
            fd_check(&[uniform(&[1, 6], -1.0, 1.0, 25)], probes, 24, |t, v| {
                let r = t.repeat_batch(v[0], 3)?;
                let sq = t.mul(r, r)?;
                let flat = t.reshape(sq, &[3, 6])?;
                let g = t.gather(flat, &[5, 0, 2])?;
                weighted_sum(t, g, 14)
            }),
        ),
        (
            "gaussian_kl",
            fd_check(
                &[uniform(&[20], 0.05, 0.95, 26), uniform(&[20], -3.0, 3.0, 27)],
                probes,
                25,
                |t, v| {
                    let kl = t.gaussian_kl(v[0], v[1])?;
                    weighted_sum(t, kl, 15)
                },
            ),
        ),
        (
            "conv-relu-dense chain",
            fd_check(
                &[
                    uniform(&[2, 1, 6, 6], -1.0, 1.0, 28),
                    uniform(&[3, 1, 3, 3], -1.0, 1.0, 29),
                    uniform(&[3], -0.1, 0.1, 30),
                    uniform(&[4, 12], -1.0, 1.0, 31),
                    uniform(&[4], -1.0, 1.0, 32),
                ],
                probes,
                26,
                |t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                    let r = t.relu(c);
                    let p = t.maxpool2d(r, 2)?;
                    let f = t.reshape(p, &[2, 12])?;
                    let l = t.linear(f, v[3], v[4])?;
                    t.cross_entropy(l, &[1, 3])
                },
            ),
        ),
    ]
}

/// Worst gap between the closed-form KL and quadrature on a 50x50 grid
/// of `(lambda, r)`.
pub fn kl_grid_worst() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..50 {
        for j in 0..50 {
            let l = 0.01 + 0.98 * i as f64 / 49.0;
            let r = -3.0 + 6.0 * j as f64 / 49.0;
            worst = worst.max((gaussian_kl_value(l, r) - kl_quadrature(l, r)).abs());
        }
    }
    worst
}

/// `ln sum exp` over a slice.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `(I[R,Z], L_I)` for ten random 8-value distributions of `R` and
/// mask values, the mutual information by quadrature.
pub fn upper_bound_draws(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng(seed);
    let mut out = Vec::new();
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    for _ in 0..10 {
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let lambda: f64 = rng.random_range(0.05..0.95);

        let mu: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let var: f64 = values.iter().zip(&probs).map(|(v, p)| p * (v - mu).powi(2)).sum();
        let sigma = var.sqrt();

        let s = (1.0 - lambda) * sigma;
        let means: Vec<f64> = values.iter().map(|v| lambda * v + (1.0 - lambda) * mu).collect();
        let ln_cond = |z: f64, j: usize| ln_norm - s.ln() - 0.5 * ((z - means[j]) / s).powi(2);
        let ln_marg = |z: f64| {
            let terms: Vec<f64> = (0..8).map(|j| probs[j].ln() + ln_cond(z, j)).collect();
            log_sum_exp(&terms)
        };
        // I[R,Z] = sum_j p_j KL(p(z|r_j) || p(z)), each by quadrature.
        let mi: f64 = (0..8)
            .map(|j| {
                let lo = means[j] - 12.0 * s;
                let hi = means[j] + 12.0 * s;
                probs[j] * simpson(|z| ln_cond(z, j).exp() * (ln_cond(z, j) - ln_marg(z)), lo, hi, 4000)
            })
            .sum();
        let bound: f64 = (0..8)
            .map(|j| probs[j] * gaussian_kl_value(lambda, (values[j] - mu) / sigma))
            .sum();
        out.push((mi, bound));
    }
    out
}

/// Worst relative error of the per-sample objective gradient w.r.t. the
/// mask parameters against central differences, in f64 with fixed noise.
pub fn objective_fd_worst() -> f64 {
    let model: Model<f64> = Model::<f32>::init(build_default_model(5).unwrap(), 21).cast();
    let tap = model.tap("conv3").unwrap();
    let ds = ShapesDataset::generate(DatasetConfig { train_count: 8, val_count: 0, seed: 2, ..Default::default() }).unwrap();
    let x = ShapesDataset::batch(&ds.train).unwrap().cast::<f64>();
    let stats = estimate_stats(&model, &tap, &x).unwrap();
    let r = model.features(&x.index_first(0).unwrap().reshape(vec![1, 1, 64, 64]).unwrap(), &tap).unwrap();
    let eps = sample_noise(&stats, 3, 99);
    let (c, h, w) = tap.shape;
    let mask = AlphaMask { alpha: uniform(&[c, h, w], -2.0, 2.0, 31), sigma_s: 1.0 };
    let beta = 10.0;
    let (_, grad) = per_sample_objective(&model, &tap, &stats, &r, &mask, &eps, 2, beta).unwrap();

    let hstep = 1e-5;
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..mask.alpha.numel());
        let eval = |d: f64| {
            let mut m = mask.clone();
            m.alpha.data_mut()[i] += d;
            per_sample_objective(&model, &tap, &stats, &r, &m, &eps, 2, beta).unwrap().0
        };
        let numeric = (eval(hstep) - eval(-hstep)) / (2.0 * hstep);
        let analytic = grad.data()[i];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

/// Mean absolute difference between horizontally adjacent elements.
pub fn hf_energy(l: &Tensor<f32>) -> f64 {
    let w = l.shape()[2];
    let mut acc = 0.0;
    let mut n = 0;
    for row in l.data().chunks(w) {
        for p in row.windows(2) {
            acc += (p[1] - p[0]).abs() as f64;
            n += 1;
        }
    }
    acc / n as f64
}
