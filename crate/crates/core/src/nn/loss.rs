//! Scalar loss functions on plain tensors. The tape records the same losses for training.

use crate::error::{Error, Result};
use crate::nn::tape;
use crate::nn::tensor::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse", target, pred)?;
    Ok(tape::mse_value(pred.data(), target.data()))
}

/// Mean binary cross-entropy; `pred` must already be a probability.
pub fn loss_bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("bce", target, pred)?;
    tape::bce_value(pred.data(), target.data())
}

/// `KL(N(mu, exp(logvar)) ‖ N(0, I))`, summed over all elements of a single code vector.
pub fn loss_kl_gaussian(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    same_shape("kl_gaussian", mu, logvar)?;
    Ok(tape::kl_value(mu.data(), logvar.data()))
}
