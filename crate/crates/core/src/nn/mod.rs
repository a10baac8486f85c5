//! Minimal differentiable computation substrate.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
