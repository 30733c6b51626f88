//! The classifier under study and its synthetic training data.

mod archive;
mod dataset;
pub mod idx;
mod model;
mod train;

pub use archive::{load_tensors, read_archive, save_tensors, write_archive};
pub use dataset::{parse_boxes, BBox, DatasetConfig, Sample, ShapeKind, ShapesDataset, PIXEL_MEAN, PIXEL_STD};
pub use model::{
    build_default_model, Bound, Downsample, ForwardOptions, LayerKind, LayerParams, LayerSpec, Model, ModelSpec,
    TapPoint, DEFAULT_CHANNELS, DEFAULT_INPUT,
};
pub use train::{accuracy, train, EpochLog, TrainConfig, TrainLog};
pub(crate) use train::argmax;
