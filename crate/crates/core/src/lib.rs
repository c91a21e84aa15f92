//! Retinal vessel segmentation with a hybrid CNN-Transformer U-Net.
//!
//! The crate is self-contained: a small dense tensor engine with reverse-mode
//! differentiation ([`autodiff`]), the network building blocks ([`nn`]), the
//! assembled segmentation network ([`model`]), fundus image preprocessing and
//! patch geometry ([`pipeline`]), evaluation metrics ([`metrics`]) and the
//! training / evaluation loop ([`trainer`]).

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
mod kernels;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Conv2dSpec, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{CostReport, Model, ModelConfig};
pub use tensor::Tensor;
