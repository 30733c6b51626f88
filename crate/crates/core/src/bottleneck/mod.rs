//! Noise-injection bottleneck: statistics, mask parameterization, the
//! closed-form information cost, per-sample fitting and the readout network.

mod layer;
mod per_sample;
mod readout;
mod stats;
mod sweep;

pub use layer::{
    bottleneck_forward, information_loss, information_loss_with_lambda, lambda_on_tape, mix_on_tape, normalize,
    normalize_on_tape, sample_noise, AlphaMask, ALPHA_INIT,
};
pub use per_sample::{
    fit_mask, per_sample_attribution, per_sample_objective, BottleneckConfig, FitDiagnostics, MaskFit, TargetMode,
};
pub use readout::{readout_attribution, readout_class_prob, train_readout, ReadoutConfig, ReadoutEpoch, ReadoutNet};
pub use stats::{estimate_stats, FeatureStats, Welford, SIGMA_FLOOR};
pub use sweep::{beta_depth_sweep, sweep_tsv, SweepRow};
