//! Probabilistic time-series forecasting with a bidirectional temporal
//! convolutional network.

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{BiTCNModel, HyperParams, InputDims, ModelInputs};
pub use tensor::{IntTensor, Tensor};

/// Package version plus `git describe` of the build tree.
pub const BUILD_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("BITCN_GIT_DESCRIBE"));
