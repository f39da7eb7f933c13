use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::module::{Mode, Module};
use crate::nn::optim::AdamState;
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Shuffled minibatch index lists for one epoch.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains a single-logit network with BCE-with-logits and Adam; returns per-epoch mean loss.
pub fn fit_binary(net: &mut Module, inputs: &Tensor, labels: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if inputs.batch_len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} labels",
            inputs.batch_len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot train on an empty set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches(labels.len(), cfg.batch_size, &mut rng) {
            let xb = inputs.select(&batch);
            let yb = Tensor::new(vec![batch.len(), 1], batch.iter().map(|&i| labels[i]).collect())?;
            let mut tape = Tape::new();
            let x = tape.leaf(&xb);
            let z = net.forward_var(&mut tape, x, &mut Mode::Train(&mut rng))?;
            let loss = tape.bce_with_logits(z, &yb)?;
            tape.backward(loss)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            net.accumulate_grads(&tape)?;
            adam.step(&mut net.parameters_mut())?;
        }
        history.push(total / labels.len() as f64);
    }
    Ok(history)
}

/// Eval-mode forward over `inputs` in chunks, returning one logit per sample.
pub fn logits(net: &Module, inputs: &Tensor) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let n = inputs.batch_len();
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let y = net.forward(&inputs.select(chunk), &mut Mode::Eval)?;
        if y.sample_len() != 1 {
            return Err(Error::shape("logits", "[batch, 1]", y.shape()));
        }
        out.extend_from_slice(y.data());
    }
    Ok(out)
}

/// Eval-mode logits and the gradient of `Σ weights[i] · logit[i]` with respect to `inputs`.
pub fn logit_input_grad(net: &Module, inputs: &Tensor, weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    if weights.len() != inputs.batch_len() {
        return Err(Error::invalid("one gradient weight per sample is required"));
    }
    let mut tape = Tape::frozen();
    let x = tape.input(inputs.clone().with_grad());
    let z = net.forward_var(&mut tape, x, &mut Mode::Eval)?;
    if tape.value(z).sample_len() != 1 {
        return Err(Error::shape("logits", "[batch, 1]", tape.shape(z)));
    }
    let zs = tape.value(z).data().to_vec();
    let w = tape.constant(Tensor::new(tape.shape(z).to_vec(), weights.to_vec())?);
    let weighted = tape.mul(z, w)?;
    let total = tape.sum(weighted)?;
    tape.backward(total)?;
    let grad = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; inputs.len()]);
    Ok((zs, Tensor::new(inputs.shape().to_vec(), grad)?))
}
