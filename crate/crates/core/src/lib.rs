pub mod align;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
