//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var, MIN_NORM};
pub use tensor::Tensor;
