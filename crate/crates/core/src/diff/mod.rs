//! Minimal reverse-mode differentiable computation core: tensors, a
//! recording tape, layers, losses, Adam and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::LayerSpec;
pub use params::{BufferId, Init, ParamBuilder, ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sequence length {len} is not divisible by patch length {patch}")]
    PatchLengthIndivisible { len: usize, patch: usize },
}
