//! Tree-structured gated convolutional network predicting temperatures.

pub mod adam;
pub mod conv;
pub mod net;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d_dilated, conv_forward, FeatureMap, Filter};
pub use net::{backward, forward, forward_ibts, loss, ForwardCache, LossSum, Mode, TreeNetParams, DEFAULT_EPSILON};
pub use train::{mean_nll, predict, train, EpochLoss, FitArtifacts, TrainConfig};
