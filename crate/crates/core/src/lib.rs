//! Feature-level fusion of a ResNet-style CNN and a MaxViT-style
//! multi-axis transformer for binary chest X-ray classification, together
//! with the small autodiff framework, training loop and evaluation metrics
//! it runs on.

pub mod backbones;
pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{Class, FusionModel, FusionModelConfig, ModelKind, Prediction, Scale};
pub use rng::RngState;
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
