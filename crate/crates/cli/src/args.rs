use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iba_core::methods::{parse_methods, Method};

#[derive(Parser, Debug)]
#[command(
    name = "iba",
    version,
    about = "Information bottleneck attribution on a synthetic shapes benchmark",
    args_override_self = true
)]
pub struct Cli {
    /// File of `key = value` lines used as flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Base seed; the IBA_SEED environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a shapes dataset (config, labels and boxes).
    GenData(GenData),
    /// Train the classifier.
    Train(Train),
    /// Estimate per-feature mean and std at a tap.
    Stats(Stats),
    /// Write heatmaps for a range of images.
    Attribute(Attribute),
    /// Fit the readout network that predicts bottleneck masks.
    TrainReadout(TrainReadout),
    /// Information and class probability over beta and depth.
    Sweep(Sweep),
    /// Degradation, Sensitivity-n and bounding-box scores.
    Evaluate(Evaluate),
    /// Cascading parameter randomization.
    Sanity(Sanity),
}

impl Command {
    pub const NAMES: [&'static str; 8] =
        ["gen-data", "train", "stats", "attribute", "train-readout", "sweep", "evaluate", "sanity"];

    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Stats(_) => "stats",
            Command::Attribute(_) => "attribute",
            Command::TrainReadout(_) => "train-readout",
            Command::Sweep(_) => "sweep",
            Command::Evaluate(_) => "evaluate",
            Command::Sanity(_) => "sanity",
        }
    }
}

#[derive(Args, Debug)]
pub struct Out {
    /// Run directory; must be new or empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Inputs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Model archive written by train.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsSource {
    /// Precomputed statistics archive; estimated from training images otherwise.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Training images used when estimating statistics.
    #[arg(long, default_value_t = 1000)]
    pub stats_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Label,
    Predicted,
}

#[derive(Args, Debug)]
pub struct Bottleneck {
    /// Layer the bottleneck is inserted after.
    #[arg(long, default_value = "conv3")]
    pub tap: String,
    /// Information weight times the number of features.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Std of the Gaussian smoothing of the mask.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_s: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Noisy copies of the image per optimization step.
    #[arg(long, default_value_t = 10)]
    pub copies: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Target::Label)]
    pub target: Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    pub out: Out,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 4000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub val: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DownsampleArg {
    Maxpool,
    Strided,
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    pub out: Out,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = DownsampleArg::Maxpool)]
    pub downsample: DownsampleArg,
}

#[derive(Args, Debug)]
pub struct Stats {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value = "conv3")]
    pub tap: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct Attribute {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[command(flatten)]
    pub bottleneck: Bottleneck,
    #[command(flatten)]
    pub stats: StatsSource,
    /// Readout network archive (readout method only).
    #[arg(long)]
    pub readout: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// First image index within the split.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct TrainReadout {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub stats: StatsSource,
    /// Bottleneck position.
    #[arg(long, default_value = "conv3")]
    pub tap: String,
    /// Layers whose features feed the readout network.
    #[arg(long, default_value = "conv1,conv2,conv3,conv4")]
    pub read_taps: String,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_s: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Training images used.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct Sweep {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10,100,1000")]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "conv3")]
    pub taps: Vec<String>,
    /// Validation images averaged over.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 1000)]
    pub stats_samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_s: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub copies: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_parser = parse_method_list, default_value = "random,per-sample,gradient,occlusion8")]
    pub methods: MethodList,
    #[arg(long, default_value_t = 8)]
    pub tile: usize,
    /// Validation images scored.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Leading images used for Sensitivity-n; 0 skips it.
    #[arg(long, default_value_t = 10)]
    pub sensitivity_images: usize,
    #[arg(long, default_value_t = 6)]
    pub sensitivity_points: usize,
    #[arg(long, default_value_t = 100)]
    pub sensitivity_sets: usize,
    #[command(flatten)]
    pub bottleneck: Bottleneck,
    #[command(flatten)]
    pub stats: StatsSource,
    #[arg(long)]
    pub readout: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Sanity {
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_parser = parse_method, default_value = "per-sample")]
    pub method: Method,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Randomization order; defaults to every parameterized layer, output first.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[command(flatten)]
    pub bottleneck: Bottleneck,
    #[arg(long, default_value_t = 1000)]
    pub stats_samples: usize,
    #[arg(long)]
    pub readout: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: iba_core::Error| e.to_string())
}

#[derive(Clone, Debug)]
pub struct MethodList(pub Vec<Method>);

fn parse_method_list(s: &str) -> Result<MethodList, String> {
    let m = parse_methods(s).map_err(|e| e.to_string())?;
    if m.is_empty() {
        return Err("no methods given".into());
    }
    Ok(MethodList(m))
}
