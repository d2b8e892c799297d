//! Multiscale spatio-temporal graph neural network for skeleton motion
//! prediction, built on a small reverse-mode autodiff tape over `f64` tensors.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graphs;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mstgcu;
pub mod multiscale;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::MstGnn;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
