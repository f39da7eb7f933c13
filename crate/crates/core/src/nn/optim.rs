use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to `params` and clears their gradients.
    ///
    /// Moment buffers are allocated on the first call; later calls must pass the
    /// same parameter list in the same order.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::invalid("adam state does not match the parameter list"));
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Elementwise Adam over a flat buffer, for optimizing inputs rather than parameters.
#[derive(Debug, Clone)]
pub(crate) struct FlatAdam {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
}

impl FlatAdam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (((xi, gi), mi), vi) in x.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *mi = B1 * *mi + (1.0 - B1) * gi;
            *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            *xi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]).with_grad();
        p.grad = Some(vec![0.0, 0.0]);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
        assert!(p.grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let g = [3.0, -0.5];
        let mut p = Tensor::from_vec(vec![0.0, 0.0]).with_grad();
        p.grad = Some(g.to_vec());
        let mut adam = AdamState::new(0.01);
        adam.step(&mut [&mut p]).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
            assert!(x.abs() < 0.01 && x.abs() > 0.01 * (1.0 - 1e-7));
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::from_vec(vec![1.0]).with_grad();
        let mut adam = AdamState::new(0.01);
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::MissingGrad(0))));
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let mut p = Tensor::from_vec(vec![1.0]).with_grad();
        let mut adam = AdamState::new(0.01);
        let mut reached = None;
        for step in 1..=500 {
            let x = p.data()[0];
            p.grad = Some(vec![2.0 * x]);
            adam.step(&mut [&mut p]).unwrap();
            if p.data()[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "|x| = {} after 500 steps", p.data()[0].abs());
    }
}
