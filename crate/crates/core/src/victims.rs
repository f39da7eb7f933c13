//! The classifiers under attack: an MLP for tabular data and a small CNN for images.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataKind, Dataset};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, fit_binary, sigmoid, train, train::logits, Mode, Module, Tensor, TrainConfig};

pub const MIN_VICTIM_ACCURACY: f64 = 0.85;

/// A binary classifier with a single output logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimModel {
    pub net: Module,
    pub task: DataKind,
    /// Index of the sequential layer whose output is the final hidden representation.
    pub feature_tap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
    /// 1 iff `probability >= 0.5`.
    pub label: u8,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        let probability = sigmoid(logit);
        Prediction {
            logit,
            probability,
            label: u8::from(probability >= 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    pub min_accuracy: f64,
}

impl VictimConfig {
    pub fn for_task(task: DataKind) -> Self {
        let train = match task {
            DataKind::Tabular { .. } => TrainConfig {
                epochs: 30,
                batch_size: 32,
                lr: 0.005,
                seed: 0,
            },
            DataKind::Image { .. } => TrainConfig {
                epochs: 12,
                batch_size: 32,
                lr: 0.005,
                seed: 0,
            },
        };
        VictimConfig {
            train,
            hidden: 32,
            min_accuracy: MIN_VICTIM_ACCURACY,
        }
    }
}

/// Spatial side after two (conv k5, pool 2) stages.
pub fn cnn_feature_side(side: usize) -> usize {
    ((side - 4) / 2 - 4) / 2
}

fn build_net(task: DataKind, hidden: usize, rng: &mut ChaCha8Rng) -> (Module, usize) {
    match task {
        DataKind::Tabular { features } => {
            let net = Module::sequential(vec![
                Module::dense(features, hidden, rng),
                Module::Relu,
                Module::dense(hidden, hidden / 2, rng),
                Module::Relu,
                Module::dense(hidden / 2, 1, rng),
            ]);
            (net, 3)
        }
        DataKind::Image { channels, side } => {
            let s = cnn_feature_side(side);
            let net = Module::sequential(vec![
                Module::conv2d(channels, 4, 5, rng),
                Module::Relu,
                Module::maxpool2d(2, 2),
                Module::conv2d(4, 8, 5, rng),
                Module::Relu,
                Module::maxpool2d(2, 2),
                Module::Flatten,
                Module::dense(8 * s * s, hidden, rng),
                Module::Relu,
                Module::dense(hidden, 1, rng),
            ]);
            (net, 8)
        }
    }
}

/// Trains a victim on the dataset's training split and checks its test accuracy.
pub fn train_victim(ds: &Dataset, cfg: &VictimConfig) -> Result<VictimModel> {
    let (x, y) = ds.train();
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::invalid("victim training split must contain both classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (mut net, feature_tap) = build_net(ds.kind, cfg.hidden, &mut rng);
    let targets: Vec<f64> = y.iter().map(|&l| f64::from(l)).collect();
    fit_binary(&mut net, &x, &targets, &cfg.train)?;
    let victim = VictimModel {
        net,
        task: ds.kind,
        feature_tap,
    };
    let (tx, ty) = ds.test();
    let accuracy = victim.accuracy(&tx, &ty)?;
    if accuracy < cfg.min_accuracy {
        return Err(Error::VictimTooWeak {
            accuracy,
            required: cfg.min_accuracy,
        });
    }
    Ok(victim)
}

impl VictimModel {
    pub fn sample_shape(&self) -> Vec<usize> {
        self.task.sample_shape()
    }

    /// Accepts a single sample or a batch and returns it as a batch.
    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.sample_shape();
        if x.shape() == shape.as_slice() {
            Ok(x.unsqueeze())
        } else if x.rank() == shape.len() + 1 && x.shape()[1..] == shape[..] {
            Ok(x.clone())
        } else {
            Err(Error::shape("victim input", format!("{shape:?} or [batch, ..{shape:?}]"), x.shape()))
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let batch = self.as_batch(x)?;
        if batch.batch_len() != 1 {
            return Err(Error::shape("predict", format!("{:?}", self.sample_shape()), x.shape()));
        }
        Ok(Prediction::from_logit(self.logits(&batch)?[0]))
    }

    pub fn predict_batch(&self, xs: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.logits(xs)?.into_iter().map(Prediction::from_logit).collect())
    }

    pub fn logits(&self, xs: &Tensor) -> Result<Vec<f64>> {
        logits(&self.net, &self.as_batch(xs)?)
    }

    pub fn labels(&self, xs: &Tensor) -> Result<Vec<u8>> {
        Ok(self.predict_batch(xs)?.into_iter().map(|p| p.label).collect())
    }

    pub fn accuracy(&self, xs: &Tensor, ys: &[u8]) -> Result<f64> {
        if ys.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let hits = self.labels(xs)?.iter().zip(ys).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / ys.len() as f64)
    }

    /// Activations at `feature_tap` for a sample or batch, as `[batch, width]`.
    pub fn hidden_features(&self, x: &Tensor) -> Result<Tensor> {
        let layers = self.net.layers();
        if self.feature_tap >= layers.len().saturating_sub(1) {
            return Err(Error::invalid(format!(
                "feature tap {} does not name a hidden layer of a {}-layer network",
                self.feature_tap,
                layers.len()
            )));
        }
        let batch = self.as_batch(x)?;
        let prefix = Module::sequential(layers[..=self.feature_tap].to_vec());
        let h = prefix.forward(&batch, &mut Mode::Eval)?;
        let n = h.batch_len();
        let w = h.sample_len();
        h.into_shape(&[n, w])
    }

    /// Logit from final hidden features (the layers after the tap).
    pub fn head_logits(&self, hidden: &Tensor) -> Result<Vec<f64>> {
        let head = Module::sequential(self.net.layers()[self.feature_tap + 1..].to_vec());
        logits(&head, hidden)
    }

    /// Logits and the gradient of `Σ weights[i] · logit[i]` with respect to every input.
    ///
    /// Samples do not interact in eval mode, so row `i` of the gradient is
    /// `weights[i] · ∂logit[i]/∂x[i]`.
    pub fn logit_input_grad(&self, xs: &Tensor, weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        train::logit_input_grad(&self.net, &self.as_batch(xs)?, weights)
    }

    /// Content hash of the architecture and parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.task).unwrap_or_default());
        h.update((self.feature_tap as u64).to_le_bytes());
        for p in self.net.parameters() {
            h.update(p.content_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "victim", self)
    }

    pub fn load(path: &Path) -> Result<VictimModel> {
        let v: VictimModel = checkpoint::load(path, "victim")?;
        v.net.validate()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_tabular;

    fn small_victim() -> (VictimModel, Dataset) {
        let ds = gen_tabular(600, 12, 3).unwrap();
        let mut cfg = VictimConfig::for_task(ds.kind);
        cfg.train.epochs = 10;
        (train_victim(&ds, &cfg).unwrap(), ds)
    }

    #[test]
    fn boundary_logit_classifies_positive() {
        let p = Prediction::from_logit(0.0);
        assert_eq!(p.probability, 0.5);
        assert_eq!(p.label, 1);
        assert!(Prediction::from_logit(10.0).probability > 0.9999);
        assert_eq!(Prediction::from_logit(-1e-12).label, 0);
    }

    #[test]
    fn batch_predict_matches_single() {
        let (v, ds) = small_victim();
        let (x, _) = ds.test();
        let batch = v.predict_batch(&x).unwrap();
        for (i, p) in batch.iter().enumerate().take(20) {
            assert_eq!(v.predict(&ds.sample(ds.split.test[i])).unwrap(), *p);
        }
    }

    #[test]
    fn retraining_with_same_seed_is_identical() {
        let (a, _) = small_victim();
        let (b, _) = small_victim();
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_features_have_tap_width_and_respond_to_input() {
        let (v, ds) = small_victim();
        let x = ds.sample(0);
        let h = v.hidden_features(&x).unwrap();
        assert_eq!(h.shape(), &[1, 16]);
        assert_eq!(h, v.hidden_features(&x).unwrap());
        // Move along the gradient so the change cannot vanish behind dead units.
        let (_, g) = v.logit_input_grad(&x, &[1.0]).unwrap();
        let j = (0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().partial_cmp(&g.data()[b].abs()).unwrap())
            .unwrap();
        let mut moved = x.clone();
        moved.data_mut()[j] += 1e-3;
        assert_ne!(v.hidden_features(&moved).unwrap(), h);
    }

    #[test]
    fn invalid_tap_and_shapes_are_errors() {
        let (mut v, _) = small_victim();
        assert!(v.predict(&Tensor::zeros(&[5])).is_err());
        v.feature_tap = 99;
        assert!(v.hidden_features(&Tensor::zeros(&[12])).is_err());
    }

    #[test]
    fn head_after_tap_reproduces_logits() {
        let (v, ds) = small_victim();
        let (x, _) = ds.test();
        let h = v.hidden_features(&x).unwrap();
        let a = v.head_logits(&h).unwrap();
        let b = v.logits(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (v, _) = small_victim();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        v.save(&path).unwrap();
        let back = VictimModel::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }
}
