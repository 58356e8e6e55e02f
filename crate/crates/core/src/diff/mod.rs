//! Dense tensors and tape-based reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, SpikeMode, SurrogateConfig, Tape, Var};
pub(crate) use tape::softplus;
pub use tensor::Tensor;
