//! Dense tensors, reverse-mode autodiff, layers, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, finite_difference_check_input, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{
    cross_entropy, gelu, gelu_grad_scalar, gelu_scalar, mse_seq_loss, phi, softmax, Tensor,
};
