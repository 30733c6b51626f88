//! Quantitative comparison of attribution maps.

mod bbox;
mod degradation;
pub mod plot;
mod report;
mod sanity;
mod sensitivity;
mod ssim;

pub use bbox::bbox_ratio;
pub use degradation::{
    degradation_curve, degradation_curves, degradation_integral, normalization, tile_order, DegradationCurve,
    Direction,
};
pub use report::{evaluate, EvalConfig, EvalReport, MethodScores};
pub use sanity::{default_layer_order, mean_ssim, percentile_normalize, sanity_check, SanityPoint};
pub use sensitivity::{n_grid, pearson, sensitivity_n, sensitivity_n_many, tiles_for, SensitivityCurve};
pub use ssim::{ssim, C1, C2};
