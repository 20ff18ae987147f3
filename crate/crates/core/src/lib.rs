//! Sparse modality-specific mixture-of-experts for a vision-language
//! transformer pretrained with masked data modeling.

pub mod autodiff;
pub mod aux_loss;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod report;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
