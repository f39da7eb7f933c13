//! Minimal neural-network engine: tensors, tape-based reverse-mode autodiff,
//! layers, losses, Adam, and checkpoints.

pub mod checkpoint;
pub(crate) mod gemm;
pub mod loss;
pub mod module;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use loss::{loss_bce, loss_kl_gaussian, loss_mse};
pub use module::{accumulate_grads, Mode, Module};
pub use optim::AdamState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{fit_binary, TrainConfig};

pub(crate) use tape::sigmoid;

/// Back-propagates a scalar loss recorded on `tape`.
pub fn backward(tape: &mut Tape, loss: Var) -> crate::Result<()> {
    tape.backward(loss)
}
