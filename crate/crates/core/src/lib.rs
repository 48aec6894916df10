//! Two-stage multivariate forecaster.
//!
//! A cross-variable encoder ([`cve`]) treats each variable's look-back
//! window as a token and attends across variables. A cross-temporal
//! convolutional encoder ([`cte`]) then refines the horizon estimate and is
//! added back onto it. Training ([`trainer`]) fits the two parameter groups
//! in strictly separate stages.

pub mod autodiff;
pub mod checkpoint;
pub mod cte;
pub mod cve;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod revin;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Activation, Graph, Var};
pub use error::{Error, Result};
pub use model::{CvtnModel, Group, ModelConfig};
pub use tensor::Tensor;
