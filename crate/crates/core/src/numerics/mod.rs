//! Dense `f64` tensors, reverse-mode differentiation and the layers and
//! optimizer the adapters are built on.

pub mod functional;
pub mod graph;
pub mod nn;
pub mod optim;
mod tensor;

pub use functional::{argmax, cross_entropy, entropy, one_hot, softmax_rows};
pub use graph::{BatchStats, Gradients, Graph, ParamId, Var};
pub use nn::{BatchNorm, BnMode, LayerNorm, Linear, Param, ParamRole, ParamSet, Scope};
pub use optim::Sgd;
pub use tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
/// Rows with a norm at or below this value cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("row {row} is not a probability vector (sum {sum})")]
    NotAProbability { row: usize, sum: f64 },
    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}
