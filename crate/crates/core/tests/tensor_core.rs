mod common;

use approx::assert_abs_diff_eq;
use common::uniform;
use iba_core::kernels::{gaussian_blur, gaussian_kernel, resize_bilinear};
use iba_core::tape::Tape;
use iba_core::{Error, Tensor};
use proptest::prelude::*;

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((i * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((i * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, ho, wo], out).unwrap()
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> iba_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_sum_of_ones() {
    let ones = Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap();
    let y = conv_value(&ones, &ones, &Tensor::zeros(vec![1]).unwrap(), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv_identity_kernel() {
    let x = uniform(&[2, 1, 5, 4], -1.0, 1.0, 1);
    let w = Tensor::full(vec![1, 1, 1, 1], 1.0).unwrap();
    let y = conv_value(&x, &w, &Tensor::zeros(vec![1]).unwrap(), 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = uniform(&[2, 3, 8, 8], -1.0, 1.0, 2);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, 3);
    let b = uniform(&[4], -1.0, 1.0, 4);
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
        let got = conv_value(&x, &w, &b, stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6, "stride {stride} pad {pad}");
    }
    // The f32 path agrees with the f64 oracle up to single precision.
    let got32 = {
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.constant(x.cast()), tape.constant(w.cast()), tape.constant(b.cast()));
        let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        tape.value(y).cast::<f64>()
    };
    assert!(got32.max_abs_diff(&naive_conv(&x, &w, &b, 1, 1)).unwrap() < 1e-5);
}

#[test]
fn conv_shape_errors_name_dims() {
    let x = uniform(&[1, 2, 4, 4], 0.0, 1.0, 5);
    let w = uniform(&[1, 3, 3, 3], 0.0, 1.0, 6);
    let b = Tensor::zeros(vec![1]).unwrap();
    let err = conv_value(&x, &w, &b, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains('2') && err.to_string().contains('3'), "{err}");
    let w = uniform(&[1, 2, 5, 5], 0.0, 1.0, 7);
    assert!(conv_value(&x, &w, &b, 1, 0).is_err());
    let w = uniform(&[1, 2, 3, 3], 0.0, 1.0, 7);
    assert!(conv_value(&x, &w, &b, 0, 0).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::zeros(vec![1, 2]).unwrap());
    let s = tape.softmax(z);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_hand_oracle() {
    let probs = [0.25f64, 0.5, 0.125, 0.125];
    let logits: Vec<f64> = probs.iter().map(|p| p.ln() + 3.0).collect();
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::from_vec(vec![2, 4], [logits.clone(), logits].concat()).unwrap());
    let ce = tape.cross_entropy(l, &[1, 2]).unwrap();
    // Mean of -ln 0.5 and -ln 0.125.
    let want = (std::f64::consts::LN_2 + 3.0 * std::f64::consts::LN_2) / 2.0;
    assert_abs_diff_eq!(tape.value(ce).item().unwrap(), want, epsilon = 1e-12);
}

#[test]
fn log_is_guarded() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![2], vec![0.0, -1.0]).unwrap());
    let y = tape.log(x);
    for &v in tape.value(y).data() {
        assert_abs_diff_eq!(v, (1e-12f64).ln(), epsilon = 1e-9);
    }
}

#[test]
fn maxpool_ties_route_to_lowest_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 3.0, 3.0]).unwrap());
    let y = tape.maxpool2d(x, 2).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn product_rule_and_constant_branch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(7.0));
    let xy = tape.mul(x, y).unwrap();
    let loss = tape.add(xy, c).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    assert_eq!(tape.grad(y).unwrap().data(), &[2.0]);
    assert!(tape.grad(c).is_none());

    // A parameter that only feeds a zero-weighted branch gets a zero gradient.
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let dead = tape.scale(x, 0.0);
    let loss = tape.sum(dead);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_a_usage_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![2]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn finite_differences_per_op() {
    for (name, err) in common::op_gradient_checks(20) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn guided_relu_blocks_negative_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(vec![4], vec![-1.0, 2.0, 3.0, 0.5]).unwrap());
    let r = tape.relu_with(x, true);
    let w = tape.constant(Tensor::from_vec(vec![4], vec![1.0, 1.0, -1.0, 2.0]).unwrap());
    let p = tape.mul(r, w).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
}

#[test]
fn blur_identity_and_constant() {
    let x = uniform(&[1, 2, 6, 7], -1.0, 1.0, 40);
    assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
    let c = Tensor::full(vec![1, 1, 9, 9], 0.37f64).unwrap();
    let y = gaussian_blur(&c, 1.3).unwrap();
    for &v in y.data() {
        assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
    }
    let k = gaussian_kernel::<f64>(1.0);
    assert_eq!(k.len(), 7);
    assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

/// Mirror without repeating the edge sample, written independently.
fn mirror(i: isize, n: isize) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn dense_blur(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push((dy, dx, v));
            total += v;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            out[y as usize * w + xx as usize] = kernel
                .iter()
                .map(|&(dy, dx, v)| v / total * x[mirror(y + dy, h as isize) * w + mirror(xx + dx, w as isize)])
                .sum();
        }
    }
    out
}

#[test]
fn blur_matches_dense_2d_oracle() {
    let mut delta = vec![0.0f64; 11 * 11];
    delta[5 * 11 + 5] = 1.0;
    let d = Tensor::from_vec(vec![1, 1, 11, 11], delta.clone()).unwrap();
    let got = gaussian_blur(&d, 1.0).unwrap();
    let k = gaussian_kernel::<f64>(1.0);
    assert_abs_diff_eq!(got.data()[5 * 11 + 5], k[3] * k[3], epsilon = 1e-15);
    let want = dense_blur(&delta, 11, 11, 1.0);
    for (a, b) in got.data().iter().zip(&want) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    // Borders exercise the reflection.
    let x = uniform(&[1, 1, 8, 13], -1.0, 1.0, 41);
    let got = gaussian_blur(&x, 1.5).unwrap();
    let want = dense_blur(x.data(), 8, 13, 1.5);
    for (a, b) in got.data().iter().zip(&want) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn resize_examples() {
    let x = uniform(&[2, 3, 5, 6], -1.0, 1.0, 42);
    assert_eq!(resize_bilinear(&x, 5, 6).unwrap(), x);
    let one = Tensor::from_vec(vec![1, 1, 1, 1], vec![4.5f64]).unwrap();
    let y = resize_bilinear(&one, 3, 7).unwrap();
    assert!(y.data().iter().all(|&v| v == 4.5));

    // Source coordinate (o + 0.5) * 2/4 - 0.5 = -0.25, 0.25, 0.75, 1.25,
    // clamped to [0, 1]: per-axis weights on the second sample 0, .25, .75, 1.
    let g = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
    let y = resize_bilinear(&g, 4, 4).unwrap();
    let f = [0.0, 0.25, 0.75, 1.0];
    for (r, fy) in f.iter().enumerate() {
        for (c, fx) in f.iter().enumerate() {
            let top = fx * 1.0;
            let bottom = 2.0 + fx * 1.0;
            assert_abs_diff_eq!(y.data()[r * 4 + c], top + fy * (bottom - top), epsilon = 1e-15);
        }
    }
    assert!(resize_bilinear(&g, 0, 3).is_err());
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let x = uniform(&[2, 2, 9, 9], -1.0, 1.0, 50).cast::<f32>();
        let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, 51).cast::<f32>();
        let b = uniform(&[3], -1.0, 1.0, 52).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.param(x), tape.param(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        let y = tape.gaussian_blur(y, 1.0).unwrap();
        let y = tape.resize_bilinear(y, 5, 5).unwrap();
        let s = tape.mean(y);
        tape.backward(s).unwrap();
        (tape.value(y).clone(), tape.grad(xv).unwrap().clone(), tape.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..40), k in 1usize..6) {
        let rows = vals.len() / k;
        prop_assume!(rows >= 1);
        let data = vals[..rows * k].to_vec();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![rows, k], data).unwrap());
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_mean_with_constant_border(
        interior in prop::collection::vec(-5.0f64..5.0, 64),
        border in -2.0f64..2.0,
        sigma in 0.3f64..1.5,
    ) {
        // Constant band of width 2r around an 8x8 random interior.
        let r = (3.0 * sigma).ceil() as usize;
        let n = 8 + 4 * r;
        let mut img = vec![border; n * n];
        for y in 0..8 {
            for x in 0..8 {
                img[(y + 2 * r) * n + x + 2 * r] = interior[y * 8 + x];
            }
        }
        let t = Tensor::from_vec(vec![1, 1, n, n], img).unwrap();
        let out = gaussian_blur(&t, sigma).unwrap();
        prop_assert!((out.mean() - t.mean()).abs() < 1e-6);
    }

    #[test]
    fn resize_same_shape_is_identity(h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
        let x = uniform(&[1, 2, h, w], -1.0, 1.0, seed);
        prop_assert_eq!(resize_bilinear(&x, h, w).unwrap(), x);
    }

    #[test]
    fn integer_upscale_conserves_mass(h in 1usize..6, w in 1usize..6, f in 1usize..4, seed in 0u64..1000) {
        let x = uniform(&[1, 1, h, w], 0.0, 1.0, seed);
        let y = resize_bilinear(&x, h * f, w * f).unwrap();
        prop_assert!((y.sum() / (f * f) as f64 - x.sum()).abs() < 1e-9);
    }
}
