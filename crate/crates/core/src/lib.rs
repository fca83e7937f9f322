//! Temperature scaling for dense (per-pixel) classifiers: global, per-image
//! and learned local temperatures, calibration metrics, label fusion and a
//! synthetic data generator with known miscalibration.

pub mod dataset;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod par;
pub mod scaling;
pub mod synthgen;
pub mod tensor;
pub mod tree_net;
pub mod ts_opt;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{
    Dataset, Grid, ImageTensor, LabelMap, LogitMap, ProbMap, Sample, SampleTemperature, Split, Tensor,
    TemperatureField, TemperatureKind, IGNORE, T_MAX,
};
