//! Volumetric promptable segmentation built by inflating a 2D vision
//! transformer into a 3D encoder with spatial adapters, a point-prompt
//! encoder and a multi-level aggregation decoder.

pub mod ablation;
pub mod audit;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod forward;
pub mod grid;
pub mod infer;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod preprocess;
pub mod prompt;
pub mod regions;
pub mod tensor;
pub mod train;
pub mod vit2d;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Dims, Grid3};
pub use tensor::Tensor;
