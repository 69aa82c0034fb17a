//! Defensive distillation at desk scale: a small tensor/autodiff engine,
//! temperature-softmax classifiers, the four-step distillation pipeline,
//! saliency-map (JSMA) and fast-gradient-sign attacks, and the robustness
//! metrics used to compare defended and undefended models.

pub mod attack;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;
