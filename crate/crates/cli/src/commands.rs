use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use iba_core::bottleneck::{
    beta_depth_sweep, estimate_stats, readout_class_prob, sweep_tsv, train_readout, BottleneckConfig, FeatureStats,
    ReadoutConfig, ReadoutNet, TargetMode,
};
use iba_core::evaluation::plot::{line_chart, Series};
use iba_core::evaluation::{default_layer_order, evaluate, sanity_check, EvalConfig, EvalReport, MethodScores};
use iba_core::methods::{attribute_all, Method, MethodSettings, Resources};
use iba_core::network::{
    accuracy, train, DatasetConfig, Downsample, Model, ModelSpec, Sample, ShapesDataset, TrainConfig, DEFAULT_CHANNELS,
};
use iba_core::Tensor;

use crate::args::*;
use crate::rundir::RunDir;
use crate::Failure;

type Res<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Res<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn dispatch(cmd: &Command, seed: u64, echo: &str) -> Res<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, seed, echo),
        Command::Train(a) => train_cmd(a, seed, echo),
        Command::Stats(a) => stats_cmd(a, echo),
        Command::Attribute(a) => attribute(a, seed, echo),
        Command::TrainReadout(a) => train_readout_cmd(a, seed, echo),
        Command::Sweep(a) => sweep(a, seed, echo),
        Command::Evaluate(a) => evaluate_cmd(a, seed, echo),
        Command::Sanity(a) => sanity(a, seed, echo),
    }
}

fn load_data(path: &Path) -> Res<ShapesDataset> {
    Ok(ShapesDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn load_model(path: &Path) -> Res<Model> {
    Ok(Model::load(path).with_context(|| format!("loading model {}", path.display()))?)
}

fn train_images(ds: &ShapesDataset, n: usize) -> Res<Tensor<f32>> {
    if n == 0 || ds.train.is_empty() {
        return Err(anyhow::anyhow!("statistics need at least one training image").into());
    }
    Ok(ShapesDataset::batch(&ds.train[..n.min(ds.train.len())])?)
}

fn feature_stats(model: &Model, tap: &str, src: &StatsSource, ds: &ShapesDataset) -> Res<FeatureStats> {
    let tap = model.tap(tap)?;
    match &src.stats {
        Some(p) => {
            let s = FeatureStats::load(p).with_context(|| format!("loading statistics {}", p.display()))?;
            s.check_tap(&tap)?;
            Ok(s)
        }
        None => Ok(estimate_stats(model, &tap, &train_images(ds, src.stats_samples)?)?),
    }
}

fn settings(b: &Bottleneck, seed: u64) -> MethodSettings {
    MethodSettings {
        tap: b.tap.clone(),
        bottleneck: BottleneckConfig {
            beta_over_k: b.beta,
            iterations: b.iterations,
            copies: b.copies,
            lr: b.lr,
            sigma_s: b.sigma_s,
            target: match b.target {
                Target::Label => TargetMode::TrueLabel,
                Target::Predicted => TargetMode::Predicted,
            },
            seed,
        },
        seed,
        ..MethodSettings::default()
    }
}

fn check_bottleneck(b: &Bottleneck) -> Res<()> {
    settings(b, 0).bottleneck.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn load_readout(path: Option<&Path>) -> Res<ReadoutNet> {
    let p = match path {
        Some(p) => p,
        None => return usage("the readout method needs --readout"),
    };
    Ok(ReadoutNet::load(p).with_context(|| format!("loading readout {}", p.display()))?)
}

/// Heatmaps for each method, sharing statistics and the readout network.
fn attribute_methods(
    methods: &[Method],
    model: &Model,
    ds: &ShapesDataset,
    samples: &[Sample],
    b: &Bottleneck,
    src: &StatsSource,
    readout: Option<&Path>,
    seed: u64,
) -> Res<Vec<(String, Vec<iba_core::heatmap::Heatmap>)>> {
    let settings = settings(b, seed);
    let net = match methods.contains(&Method::Readout) {
        true => Some(load_readout(readout)?),
        false => None,
    };
    let stats = match methods.contains(&Method::PerSample) {
        true => Some(feature_stats(model, &b.tap, src, ds)?),
        false => None,
    };
    let readout_stats = match &net {
        Some(n) if n.bottleneck_tap == b.tap && stats.is_some() => stats.clone(),
        Some(n) => Some(feature_stats(model, &n.bottleneck_tap, src, ds)?),
        None => None,
    };
    let res = Resources {
        stats: stats.as_ref(),
        stats_images: None,
        readout: net.as_ref().zip(readout_stats.as_ref()),
    };
    let mut out = Vec::new();
    for &m in methods {
        out.push((m.name().to_string(), attribute_all(m, model, samples, &settings, &res)?));
    }
    Ok(out)
}

fn gen_data(a: &GenData, seed: u64, echo: &str) -> Res<()> {
    let cfg = DatasetConfig {
        classes: a.classes,
        image_size: a.image_size,
        channels: a.channels,
        train_count: a.train,
        val_count: a.val,
        seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let run = RunDir::create(&a.out.out)?;
    let ds = ShapesDataset::generate(cfg)?;
    ds.save(run.path())?;
    run.seal(echo)?;
    println!("wrote {} train and {} val images to {}", ds.train.len(), ds.val.len(), a.out.out.display());
    Ok(())
}

fn train_cmd(a: &Train, seed: u64, echo: &str) -> Res<()> {
    if a.batch_size == 0 || !(a.lr > 0.0) {
        return usage("--batch-size and --lr must be positive");
    }
    let ds = load_data(&a.data)?;
    let c = &ds.config;
    let down = match a.downsample {
        DownsampleArg::Maxpool => Downsample::MaxPool,
        DownsampleArg::Strided => Downsample::StridedConv,
    };
    let spec = ModelSpec::conv_net(c.classes, (c.channels, c.image_size, c.image_size), DEFAULT_CHANNELS, down)?;
    let run = RunDir::create(&a.out.out)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed,
    };
    let (model, log) = train(&Model::init(spec, seed), &ds, &cfg)?;
    model.save(run.join("model.ibaw"))?;
    run.write("train_log.tsv", log.to_tsv())?;
    run.seal(echo)?;
    println!("validation accuracy {:.4}", accuracy(&model, &ds.val)?);
    Ok(())
}

fn stats_cmd(a: &Stats, echo: &str) -> Res<()> {
    if a.samples == 0 {
        return usage("--samples must be at least 1");
    }
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let tap = model.tap(&a.tap)?;
    let run = RunDir::create(&a.out.out)?;
    let stats = estimate_stats(&model, &tap, &train_images(&ds, a.samples)?)?;
    stats.save(run.join("stats.ibaw"))?;
    run.seal(echo)?;
    println!("statistics for {} over {} images", a.tap, stats.n_samples);
    Ok(())
}

fn split(ds: &ShapesDataset, s: Split) -> &[Sample] {
    match s {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
    }
}

fn leading(samples: &[Sample], count: usize) -> Res<&[Sample]> {
    if count == 0 || samples.is_empty() {
        return usage("need at least one image");
    }
    Ok(&samples[..count.min(samples.len())])
}

fn attribute(a: &Attribute, seed: u64, echo: &str) -> Res<()> {
    check_bottleneck(&a.bottleneck)?;
    if a.count == 0 {
        return usage("--count must be at least 1");
    }
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let pool = split(&ds, a.split);
    if a.offset >= pool.len() {
        return usage(format!("--offset {} is past the {} images of the split", a.offset, pool.len()));
    }
    let samples = &pool[a.offset..(a.offset + a.count).min(pool.len())];
    let run = RunDir::create(&a.out.out)?;
    let maps = attribute_methods(
        &[a.method],
        &model,
        &ds,
        samples,
        &a.bottleneck,
        &a.stats,
        a.readout.as_deref(),
        seed,
    )?;
    let prefix = match a.split {
        Split::Train => "train",
        Split::Val => "val",
    };
    for hm in &maps[0].1 {
        let id = hm.image_id.expect("attribute_all sets the image id");
        hm.write(run.path(), &format!("{}_{prefix}{id:05}", a.method))?;
    }
    run.seal(echo)?;
    println!("wrote {} heatmaps", samples.len());
    Ok(())
}

fn train_readout_cmd(a: &TrainReadout, seed: u64, echo: &str) -> Res<()> {
    if a.samples == 0 || a.batch_size == 0 || !(a.lr > 0.0) {
        return usage("--samples, --batch-size and --lr must be positive");
    }
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let stats = feature_stats(&model, &a.tap, &a.stats, &ds)?;
    let run = RunDir::create(&a.out.out)?;
    let cfg = ReadoutConfig {
        read_taps: a.read_taps.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        bottleneck_tap: a.tap.clone(),
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        beta_over_k: a.beta,
        sigma_s: a.sigma_s,
        hidden: a.hidden,
        seed,
    };
    let train_set = &ds.train[..a.samples.min(ds.train.len())];
    let (net, log) = train_readout(&model, &stats, train_set, &cfg)?;
    net.save(run.join("readout.ibaw"))?;
    stats.save(run.join("stats.ibaw"))?;
    let mut s = String::from("epoch\tmean_loss\tmean_info_per_k\n");
    for e in &log {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", e.epoch, e.mean_loss, e.mean_info_per_k);
    }
    run.write("readout_log.tsv", s)?;
    run.seal(echo)?;
    if !ds.val.is_empty() {
        let p = readout_class_prob(&net, &model, &stats, &ds.val[..ds.val.len().min(200)], seed)?;
        println!("mean validation class probability under the readout mask {p:.4}");
    }
    Ok(())
}

fn sweep(a: &Sweep, seed: u64, echo: &str) -> Res<()> {
    if a.betas.is_empty() || a.taps.is_empty() {
        return usage("--betas and --taps must be non-empty");
    }
    let base = BottleneckConfig {
        iterations: a.iterations,
        copies: a.copies,
        lr: a.lr,
        sigma_s: a.sigma_s,
        seed,
        ..BottleneckConfig::default()
    };
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let images = leading(&ds.val, a.count)?;
    let x = train_images(&ds, a.stats_samples)?;
    let mut taps = Vec::new();
    for t in &a.taps {
        let tap = model.tap(t)?;
        let stats = estimate_stats(&model, &tap, &x)?;
        taps.push((tap, stats));
    }
    let run = RunDir::create(&a.out.out)?;
    let rows = beta_depth_sweep(&model, images, &a.betas, &taps, &base)?;
    run.write("sweep.tsv", sweep_tsv(&rows))?;

    let mut xs = Vec::new();
    let mut info = Vec::new();
    let mut prob = Vec::new();
    for t in &a.taps {
        let mine: Vec<_> = rows.iter().filter(|r| &r.tap == t).collect();
        xs.push(mine.iter().map(|r| r.beta_over_k.log10()).collect::<Vec<_>>());
        info.push(mine.iter().map(|r| r.mean_info_per_k).collect::<Vec<_>>());
        prob.push(mine.iter().map(|r| r.mean_class_prob).collect::<Vec<_>>());
    }
    for (name, ys) in [("sweep_info", &info), ("sweep_prob", &prob)] {
        let series: Vec<Series> = a
            .taps
            .iter()
            .zip(xs.iter().zip(ys))
            .map(|(t, (x, y))| Series { label: t, x, y, dashed: false })
            .collect();
        let legend = line_chart(run.join(&format!("{name}.png")), &series, 480, 320)?;
        run.write(&format!("{name}.legend.txt"), legend)?;
    }
    run.seal(echo)?;
    print!("{}", sweep_tsv(&rows));
    Ok(())
}

fn evaluate_cmd(a: &Evaluate, seed: u64, echo: &str) -> Res<()> {
    check_bottleneck(&a.bottleneck)?;
    if a.tile == 0 {
        return usage("--tile must be at least 1");
    }
    if a.sensitivity_images > 0 && a.sensitivity_sets < 2 {
        return usage("--sensitivity-sets must be at least 2");
    }
    if a.methods.0.contains(&Method::Readout) && a.readout.is_none() {
        return usage("the readout method needs --readout");
    }
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let samples = leading(&ds.val, a.count)?;
    let run = RunDir::create(&a.out.out)?;
    let maps = attribute_methods(
        &a.methods.0,
        &model,
        &ds,
        samples,
        &a.bottleneck,
        &a.stats,
        a.readout.as_deref(),
        seed,
    )?;
    let cfg = EvalConfig {
        tile: a.tile,
        fill: ds.channel_means(),
        sensitivity_images: a.sensitivity_images,
        sensitivity_points: a.sensitivity_points,
        sensitivity_sets: a.sensitivity_sets,
        bbox: true,
        seed,
    };
    let report = evaluate(&model, samples, &maps, &cfg)?;
    run.write("report.tsv", report.to_tsv())?;
    report.write_curves(run.path())?;
    run.seal(echo)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn sanity(a: &Sanity, seed: u64, echo: &str) -> Res<()> {
    check_bottleneck(&a.bottleneck)?;
    if a.method == Method::Readout && a.readout.is_none() {
        return usage("the readout method needs --readout");
    }
    let ds = load_data(&a.inputs.data)?;
    let model = load_model(&a.inputs.model)?;
    let samples = leading(&ds.val, a.count)?;
    let order = match a.layers.is_empty() {
        true => default_layer_order(&model),
        false => a.layers.clone(),
    };
    let x = train_images(&ds, a.stats_samples)?;
    let net = match a.method {
        Method::Readout => Some(load_readout(a.readout.as_deref())?),
        _ => None,
    };
    let settings = settings(&a.bottleneck, seed);
    let run = RunDir::create(&a.out.out)?;
    // Statistics are re-estimated for every randomized model.
    let mut heatmaps = |m: &Model| {
        let rstats = match &net {
            Some(n) => Some(estimate_stats(m, &m.tap(&n.bottleneck_tap)?, &x)?),
            None => None,
        };
        let res = Resources {
            stats: None,
            stats_images: Some(&x),
            readout: net.as_ref().zip(rstats.as_ref()),
        };
        attribute_all(a.method, m, samples, &settings, &res)
    };
    let points = sanity_check(&model, &order, seed, &mut heatmaps)?;
    let mut s = String::from("depth\trandomized\tmean_ssim\n");
    for p in &points {
        let _ = writeln!(s, "{}\t{}\t{:.6}", p.depth, p.randomized.join(","), p.mean_ssim);
    }
    run.write("sanity.tsv", &s)?;
    let report = EvalReport {
        tile: 0,
        methods: vec![MethodScores {
            method: a.method.name().into(),
            sanity: Some(points),
            ..Default::default()
        }],
    };
    report.write_curves(run.path())?;
    run.seal(echo)?;
    print!("{s}");
    Ok(())
}
