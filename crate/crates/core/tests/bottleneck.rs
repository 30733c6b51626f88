mod common;

use approx::assert_abs_diff_eq;
use common::{desk, kl_quadrature, uniform};
use iba_core::bottleneck::*;
use iba_core::heatmap::kl_to_pixels;
use iba_core::network::*;
use iba_core::tape::gaussian_kl_value;
use iba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn stats_of(mu: Tensor<f64>, sigma: Tensor<f64>) -> FeatureStats<f64> {
    FeatureStats { mu, sigma, n_samples: 2 }
}

#[test]
fn welford_small_examples() {
    let mut w = Welford::new(2);
    w.push(&[0.0f64, 5.0]);
    w.push(&[2.0f64, 5.0]);
    let s: FeatureStats<f64> = w.finish(&[2, 1, 1]).unwrap();
    assert_abs_diff_eq!(s.mu.data()[0], 1.0);
    assert_abs_diff_eq!(s.sigma.data()[0], 2f64.sqrt(), epsilon = 1e-15);
    assert_eq!(s.sigma.data()[1], SIGMA_FLOOR);
    assert!(Welford::new(1).finish::<f64>(&[1, 1, 1]).is_err());
}

#[test]
fn stats_floor_on_constant_features() {
    let model: Model = Model::init(build_default_model(5).unwrap(), 2);
    let tap = model.tap("conv2").unwrap();
    let img = uniform(&[1, 1, 64, 64], -1.0, 1.0, 3).cast::<f32>();
    let x = Tensor::stack(&[&img.index_first(0).unwrap(); 3]).unwrap();
    let s = estimate_stats(&model, &tap, &x).unwrap();
    assert!(s.sigma.data().iter().all(|&v| v == SIGMA_FLOOR as f32));
    assert!(estimate_stats(&model, &tap, &img).is_err());
}

#[test]
fn stats_match_two_pass_oracle() {
    let model: Model<f64> = Model::init(build_default_model(5).unwrap(), 4);
    let tap = model.tap("conv3").unwrap();
    let ds = ShapesDataset::generate(DatasetConfig { train_count: 100, val_count: 0, seed: 5, ..Default::default() }).unwrap();
    let x = ShapesDataset::batch(&ds.train).unwrap().cast::<f64>();
    let s = estimate_stats(&model, &tap, &x).unwrap();
    assert_eq!(s.n_samples, 100);

    let feats = model.features(&x, &tap).unwrap();
    let k = tap.numel();
    let maps: Vec<&[f64]> = feats.data().chunks(k).collect();
    for i in 0..k {
        let mean = maps.iter().map(|m| m[i]).sum::<f64>() / 100.0;
        let var = maps.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / 99.0;
        assert!((s.mu.data()[i] - mean).abs() < 1e-5);
        assert!((s.sigma.data()[i] - var.sqrt().max(SIGMA_FLOOR)).abs() < 1e-5);
    }
}

#[test]
fn stats_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = FeatureStats {
        mu: uniform(&[2, 3, 4], -1.0, 1.0, 1).cast::<f32>(),
        sigma: uniform(&[2, 3, 4], 0.1, 1.0, 2).cast::<f32>(),
        n_samples: 7,
    };
    let p = dir.path().join("s.ibaw");
    s.save(&p).unwrap();
    let back = FeatureStats::<f32>::load(&p).unwrap();
    assert_eq!(back, s);
}

#[test]
fn lambda_stays_in_unit_interval() {
    for sigma_s in [0.0, 0.7, 2.0] {
        let mask = AlphaMask::<f64> { alpha: uniform(&[3, 9, 9], -30.0, 30.0, 8), sigma_s };
        let l = mask.lambda().unwrap();
        assert!(l.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn forward_at_extreme_masks() {
    let shape = [2, 3, 3];
    let stats = stats_of(uniform(&shape, -1.0, 1.0, 1), uniform(&shape, 0.5, 2.0, 2));
    let r = uniform(&shape, -3.0, 3.0, 3);

    let open = AlphaMask::<f64>::new(&shape, 100.0, 0.0).unwrap();
    assert_eq!(bottleneck_forward(&r, &stats, &open, 1).unwrap(), r);

    let closed = AlphaMask::<f64>::new(&shape, -100.0, 0.0).unwrap();
    let draws = 4000;
    let mut mean = [0.0; 18];
    for seed in 0..draws {
        let z = bottleneck_forward(&r, &stats, &closed, seed).unwrap();
        for (m, v) in mean.iter_mut().zip(z.data()) {
            *m += v / draws as f64;
        }
    }
    for i in 0..18 {
        let se = stats.sigma.data()[i] / (draws as f64).sqrt();
        assert!((mean[i] - stats.mu.data()[i]).abs() < 5.0 * se);
    }
}

#[test]
fn forward_half_mask_recomputes() {
    let shape = [2, 4, 4];
    let stats = stats_of(uniform(&shape, -1.0, 1.0, 4), uniform(&shape, 0.5, 2.0, 5));
    let half = AlphaMask::<f64>::new(&shape, 0.0, 0.0).unwrap();
    let z = bottleneck_forward(&stats.mu, &stats, &half, 77).unwrap();
    let eps = sample_noise(&stats, 1, 77);
    for i in 0..32 {
        let mu = stats.mu.data()[i];
        assert_abs_diff_eq!(z.data()[i], mu + 0.5 * (eps.data()[i] - mu), epsilon = 1e-12);
    }
    let batch = Tensor::stack(&[&stats.mu, &stats.mu]).unwrap();
    assert_eq!(bottleneck_forward(&batch, &stats, &half, 77).unwrap().shape(), &[2, 2, 4, 4]);
    assert!(bottleneck_forward(&uniform(&[2, 4, 5], 0.0, 1.0, 1), &stats, &half, 1).is_err());
}

#[test]
fn kl_examples() {
    for r in [-2.0, 0.0, 3.0] {
        assert_eq!(gaussian_kl_value(0.0f64, r), 0.0);
    }
    let want = kl_quadrature(0.5, 0.0);
    assert_abs_diff_eq!(want, 0.318147, epsilon = 1e-6);
    assert_abs_diff_eq!(gaussian_kl_value(0.5f64, 0.0), want, epsilon = 1e-6);
    let l5 = 1.0 / (1.0 + (-5.0f64).exp());
    assert_abs_diff_eq!(gaussian_kl_value(l5, 1.0), kl_quadrature(l5, 1.0), epsilon = 1e-6);

    // Clamp keeps lambda == 1 finite.
    let at_one = gaussian_kl_value(1.0f64, 0.0);
    assert!(at_one.is_finite());
    assert_abs_diff_eq!(at_one, gaussian_kl_value(1.0 - 1e-7, 0.0), epsilon = 1e-12);
}

#[test]
fn kl_matches_quadrature_on_grid() {
    let worst = common::kl_grid_worst();
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn information_loss_sums_elements() {
    let shape = [2, 3, 3];
    let stats = stats_of(uniform(&shape, -1.0, 1.0, 6), uniform(&shape, 0.5, 2.0, 7));
    let r = uniform(&shape, -2.0, 2.0, 8);
    let mask = AlphaMask::<f64> { alpha: uniform(&shape, -3.0, 3.0, 9), sigma_s: 0.0 };
    let (total, per) = information_loss(&r, &stats, &mask).unwrap();
    let l = mask.lambda().unwrap();
    let mut sum = 0.0;
    for i in 0..18 {
        let rn = (r.data()[i] - stats.mu.data()[i]) / stats.sigma.data()[i];
        let want = kl_quadrature(l.data()[i], rn);
        assert_abs_diff_eq!(per.data()[i], want, epsilon = 1e-6);
        assert!(per.data()[i] >= 0.0);
        sum += per.data()[i];
    }
    assert_abs_diff_eq!(total, sum, epsilon = 1e-12);
}


#[test]
fn information_cost_bounds_mutual_information() {
    for (mi, bound) in common::upper_bound_draws(12) {
        assert!(mi >= -1e-9, "mutual information {mi}");
        assert!(mi <= bound + 0.01, "I = {mi}, L_I = {bound}");
    }
}

#[test]
fn mixed_variable_does_not_inherit_variance() {
    // lambda depends on R, so Z = lambda R + (1 - lambda) eps is no longer N(0, 1).
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let stats = stats_of(Tensor::zeros(vec![1, 1, n]).unwrap(), Tensor::full(vec![1, 1, n], 1.0).unwrap());
    let mask = AlphaMask { alpha: Tensor::from_vec(vec![1, 1, n], r.iter().map(|v| 3.0 * v).collect()).unwrap(), sigma_s: 0.0 };
    let z = bottleneck_forward(&Tensor::from_vec(vec![1, 1, n], r.clone()).unwrap(), &stats, &mask, 5).unwrap();

    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
        (var, ((m4 - var * var) / v.len() as f64).sqrt())
    };
    let (vr, ser) = moments(&r);
    let (vz, sez) = moments(z.data());
    let se = (ser * ser + sez * sez).sqrt();
    assert!((vz - vr).abs() > 5.0 * se, "Var[Z] {vz} Var[R] {vr} se {se}");
}

#[test]
fn heatmap_conserves_information() {
    let ln2 = std::f64::consts::LN_2;
    for (h, w) in [(64, 64), (32, 32), (16, 16), (8, 4)] {
        let kl = uniform(&[3, h, w], 0.0, 2.0, h as u64).cast::<f32>();
        let px = kl_to_pixels(&kl, 64, 64).unwrap();
        let want = kl.data().iter().map(|&v| v as f64).sum::<f64>() / ln2;
        let got = px.data().iter().map(|&v| v as f64).sum::<f64>();
        assert!(((got - want) / want).abs() < 1e-4, "{h}x{w}: {got} vs {want}");
        assert!(px.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let worst = common::objective_fd_worst();
    assert!(worst < 1e-3, "{worst:e}");
}

#[test]
fn config_validation() {
    let ok = BottleneckConfig::default();
    assert_eq!((ok.iterations, ok.copies, ok.lr, ok.sigma_s, ok.beta_over_k), (10, 10, 1.0, 1.0, 10.0));
    assert!(ok.validate().is_ok());
    for bad in [
        BottleneckConfig { iterations: 0, ..ok.clone() },
        BottleneckConfig { copies: 0, ..ok.clone() },
        BottleneckConfig { lr: 0.0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn smoothing_suppresses_grid_artifacts() {
    let ds = ShapesDataset::generate(DatasetConfig { train_count: 1000, val_count: 4, seed: 1, ..Default::default() }).unwrap();
    let spec = ModelSpec::conv_net(5, DEFAULT_INPUT, DEFAULT_CHANNELS, Downsample::StridedConv).unwrap();
    let (model, _) = train(&Model::init(spec, 3), &ds, &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
    let tap = model.tap("conv3").unwrap();
    let stats = estimate_stats(&model, &tap, &ShapesDataset::batch(&ds.train[..300]).unwrap()).unwrap();
    let (mut sharp, mut smooth) = (0.0, 0.0);
    for s in &ds.val {
        for (sigma_s, acc) in [(0.0, &mut sharp), (1.0, &mut smooth)] {
            let cfg = BottleneckConfig { sigma_s, ..Default::default() }.for_image(s.id);
            *acc += common::hf_energy(&fit_mask(&model, &tap, &stats, &s.image, Some(s.label), &cfg).unwrap().diagnostics.lambda);
        }
    }
    assert!(sharp >= 1.5 * smooth, "{sharp} vs {smooth}");
}

#[test]
fn per_sample_without_pressure_keeps_information() {
    let d = desk();
    for s in &d.data.val[..5] {
        let cfg = BottleneckConfig { beta_over_k: 0.0, ..Default::default() }.for_image(s.id);
        let (hm, diag) = per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, Some(s.label), &cfg).unwrap();
        // Only features that argue against the target get closed.
        let closed = diag.lambda.data().iter().filter(|&&v| v < 0.5).count() as f64 / diag.lambda.numel() as f64;
        assert!(closed <= 0.1, "closed fraction {closed}");
        assert!(diag.final_prob >= diag.initial_prob, "{} < {}", diag.final_prob, diag.initial_prob);
        assert_eq!(diag.losses.len(), 10);
        assert!(!diag.stopped_early);
        assert!(hm.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn per_sample_default_and_high_beta() {
    let d = desk();
    let samples = &d.data.val[..20];
    let (mut prob, mut bits10, mut bits1000) = (0.0, 0.0, 0.0);
    for s in samples {
        let cfg = BottleneckConfig::default().for_image(s.id);
        let (hm, diag) = per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, Some(s.label), &cfg).unwrap();
        prob += diag.final_prob / 20.0;
        bits10 += hm.total();
        assert!(((hm.total() - diag.info_nats / std::f64::consts::LN_2) / hm.total()).abs() < 1e-4);
        assert_eq!((hm.tap.as_deref(), hm.beta_over_k), (Some("conv3"), Some(10.0)));

        let cfg = BottleneckConfig { beta_over_k: 1000.0, ..cfg };
        bits1000 += per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, Some(s.label), &cfg).unwrap().0.total();
    }
    assert!(prob >= 0.9, "mean class prob {prob}");
    assert!(bits1000 < 0.05 * bits10, "{bits1000} vs {bits10}");
}

#[test]
fn per_sample_is_deterministic() {
    let d = desk();
    let s = &d.data.val[7];
    let cfg = BottleneckConfig::default().for_image(s.id);
    let a = per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, Some(s.label), &cfg).unwrap();
    let b = per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, Some(s.label), &cfg).unwrap();
    assert_eq!(a.0.values, b.0.values);
    let pred = BottleneckConfig { target: TargetMode::Predicted, ..cfg };
    let (_, diag) = per_sample_attribution(&d.model, &d.tap, &d.stats, &s.image, None, &pred).unwrap();
    assert_eq!(diag.target, s.label);
}

#[test]
fn sweep_trends() {
    let d = desk();
    let samples = &d.data.val[..20];
    let betas = [0.1, 1.0, 10.0, 100.0, 1000.0];
    let rows = beta_depth_sweep(&d.model, samples, &betas, &[(d.tap.clone(), d.stats.clone())], &BottleneckConfig::default()).unwrap();
    assert_eq!(rows.len(), 5);
    for p in rows.windows(2) {
        assert!(p[1].mean_info_per_k < p[0].mean_info_per_k, "{p:?}");
        assert!(p[1].mean_class_prob <= p[0].mean_class_prob, "{p:?}");
    }
    assert!(sweep_tsv(&rows).lines().count() == 6);

    let single = beta_depth_sweep(&d.model, &samples[..2], &[10.0], &[(d.tap.clone(), d.stats.clone())], &BottleneckConfig::default()).unwrap();
    assert_eq!(single.len(), 1);

    let early = d.model.tap("conv1").unwrap();
    let late = d.model.tap("conv4").unwrap();
    let x = ShapesDataset::batch(&d.data.train[..200]).unwrap();
    let taps = [
        (early.clone(), estimate_stats(&d.model, &early, &x).unwrap()),
        (late.clone(), estimate_stats(&d.model, &late, &x).unwrap()),
    ];
    let rows = beta_depth_sweep(&d.model, &samples[..4], &[10.0], &taps, &BottleneckConfig::default()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mean_info_per_k.is_finite() && r.mean_class_prob.is_finite()));
}

#[test]
fn readout_fresh_net_smoke() {
    let d = desk();
    let cfg = ReadoutConfig::default();
    let net = ReadoutNet::new(&d.model, &cfg.read_taps, &cfg.bottleneck_tap, cfg.hidden, cfg.sigma_s, 0).unwrap();
    let x = ShapesDataset::batch(&d.data.val[..2]).unwrap();
    let (input, r) = net.collect(&d.model, &x).unwrap();
    assert_eq!(input.shape()[1], DEFAULT_CHANNELS.iter().sum::<usize>());
    assert_eq!(r.shape(), &[2, 16, 32, 32]);
    let lambda = net.predict(&input).unwrap();
    assert!(lambda.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let m = lambda.mean();
    assert!(m > 0.05 && m < 0.95, "mean lambda {m}");
    let hm = readout_attribution(&net, &d.model, &d.stats, &d.data.val[0].image).unwrap();
    assert!(hm.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(ReadoutNet::new(&d.model, &["conv9".into()], "conv3", 8, 1.0, 0).is_err());
}

#[test]
fn readout_training() {
    let d = desk();
    let before = d.model.clone();
    let cfg = ReadoutConfig::default();
    let (net, log) = train_readout(&d.model, &d.stats, &d.data.train[..1000], &cfg).unwrap();
    assert_eq!(d.model, before);
    assert_eq!(log.len(), 10);
    assert!(log.iter().all(|e| e.mean_loss.is_finite()));

    let prob = readout_class_prob(&net, &d.model, &d.stats, &d.data.val[..200], 1).unwrap();
    assert!(prob >= 0.8, "readout class prob {prob}");

    let img = &d.data.val[3].image;
    let a = readout_attribution(&net, &d.model, &d.stats, img).unwrap();
    let b = readout_attribution(&net, &d.model, &d.stats, img).unwrap();
    assert_eq!(a.values, b.values);
    assert!(a.data().iter().all(|&v| v >= 0.0));

    // Background-only noise: flat base level with the generator's pixel jitter, no shape.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut in_class = 0.0;
    let mut noise = 0.0;
    for s in &d.data.val[..20] {
        in_class += readout_attribution(&net, &d.model, &d.stats, &s.image).unwrap().total() / 20.0;
        let px = (0..64 * 64)
            .map(|_| (0.25 + rng.random_range(-0.08f32..0.08) - PIXEL_MEAN) / PIXEL_STD)
            .collect();
        let blank = Tensor::from_vec(vec![1, 64, 64], px).unwrap();
        noise += readout_attribution(&net, &d.model, &d.stats, &blank).unwrap().total() / 20.0;
    }
    assert!(noise < 0.25 * in_class, "noise {noise} vs in-class {in_class}");

    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path().join("r.ibaw")).unwrap();
    assert_eq!(ReadoutNet::load(dir.path().join("r.ibaw")).unwrap(), net);
}

#[test]
fn readout_training_is_deterministic() {
    let d = desk();
    let cfg = ReadoutConfig { epochs: 1, ..Default::default() };
    let a = train_readout(&d.model, &d.stats, &d.data.train[..64], &cfg).unwrap();
    let b = train_readout(&d.model, &d.stats, &d.data.train[..64], &cfg).unwrap();
    assert_eq!(a, b);
}
