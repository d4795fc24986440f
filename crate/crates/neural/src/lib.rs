//! Small dense-network engine: rank-2 tensors, a tensor-level reverse-mode
//! tape, feedforward networks and first-order optimizers. Everything runs in
//! `f64`.

mod checkpoint;
mod dense;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dense::{Activation, BoundNet, Dense, DenseNet, Gradients};
pub use optim::{Method, Optimizer};
pub use tape::{sigmoid, smooth_abs, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tape does not hold a completed forward pass for this output")]
    TapeIncomplete,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
