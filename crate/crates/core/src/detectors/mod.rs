//! Adversarial-sample detectors. SHAP-based detectors consume attribution maps;
//! the kernel-density and ML-LOO baselines consume raw samples through the victim.

mod autoencoder;
mod baselines;
pub mod logistic;
pub mod svm;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, Estimator};
use crate::data::{standardize, NormStats};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, fit_binary, sigmoid, train, Module, Tensor, TrainConfig};
use crate::victims::{cnn_feature_side, VictimModel};

pub use autoencoder::{
    attach_svm, autoencoder_hidden_widths, reconstruction_features, train_shap_autoencoder, vae_loss,
};
pub use baselines::{
    kde_features, kde_log_density, kde_reference, ml_loo_features, train_kernel_density_detector,
    train_kernel_density_from_features, train_ml_loo_detector, train_ml_loo_from_features, MAX_LOO_TAPS,
};
pub use logistic::{fit_logistic, LogisticModel};
pub use svm::{train_svm, SvmModel};

pub const DEFAULT_MLP_HIDDEN: usize = 160;
pub const DEFAULT_LR: f64 = 0.01;
/// The CNN detector's learning rate is unstated upstream; 0.01 diverges on standardized maps.
pub const CONV_LR: f64 = 0.001;
pub const AE_CODE_SIZE: usize = 20;
pub const VAE_CODE_SIZE: usize = 5;
pub const CONV_DROPOUT: f64 = 0.4;
pub const DEFAULT_BANDWIDTH: f64 = 0.1;
pub const DEFAULT_SVM_C: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    ShapMlp,
    ShapConv,
    ShapAeSvm,
    ShapVaeSvm,
    KernelDensity,
    MlLoo,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::ShapMlp,
        DetectorKind::ShapConv,
        DetectorKind::ShapAeSvm,
        DetectorKind::ShapVaeSvm,
        DetectorKind::KernelDensity,
        DetectorKind::MlLoo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::ShapMlp => "shap_mlp",
            DetectorKind::ShapConv => "shap_conv",
            DetectorKind::ShapAeSvm => "shap_ae_svm",
            DetectorKind::ShapVaeSvm => "shap_vae_svm",
            DetectorKind::KernelDensity => "kernel_density",
            DetectorKind::MlLoo => "ml_loo",
        }
    }

    pub fn parse(s: &str) -> Result<DetectorKind> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown detector kind '{s}'")))
    }

    /// Consumes attribution maps rather than raw samples.
    pub fn uses_maps(&self) -> bool {
        !matches!(self, DetectorKind::KernelDensity | DetectorKind::MlLoo)
    }

    pub fn is_semi_supervised(&self) -> bool {
        matches!(self, DetectorKind::ShapAeSvm | DetectorKind::ShapVaeSvm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Genuine,
    Adversarial,
    Unlabeled,
}

/// Homogeneous batch of raw (unstandardized) attribution maps with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSet {
    /// `[n, ..sample_shape]`.
    pub values: Tensor,
    pub estimator: Estimator,
    pub background_id: Option<String>,
    pub origin: Origin,
}

impl MapSet {
    pub fn from_maps(maps: &[AttributionMap], origin: Origin) -> Result<MapSet> {
        let first = maps.first().ok_or_else(|| Error::invalid("map set must not be empty"))?;
        if maps
            .iter()
            .any(|m| m.estimator != first.estimator || m.background_id != first.background_id)
        {
            return Err(Error::Provenance("maps from different estimators or backgrounds".into()));
        }
        Ok(MapSet {
            values: crate::attribution::stack_values(maps)?,
            estimator: first.estimator,
            background_id: first.background_id.clone(),
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.values.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> MapSet {
        MapSet {
            values: self.values.select(indices),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hidden_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub code_size: usize,
    /// (V)AE hidden widths; `None` interpolates geometrically between input and code size.
    pub ae_hidden: Option<(usize, usize)>,
    pub svm_c: f64,
    pub bandwidth: f64,
    pub dropout: f64,
}

impl DetectorConfig {
    pub fn for_kind(kind: DetectorKind) -> DetectorConfig {
        DetectorConfig {
            hidden_dim: DEFAULT_MLP_HIDDEN,
            lr: if kind == DetectorKind::ShapConv { CONV_LR } else { DEFAULT_LR },
            epochs: 30,
            batch_size: 32,
            seed: 0,
            code_size: if kind == DetectorKind::ShapVaeSvm { VAE_CODE_SIZE } else { AE_CODE_SIZE },
            ae_hidden: None,
            svm_c: DEFAULT_SVM_C,
            bandwidth: DEFAULT_BANDWIDTH,
            dropout: CONV_DROPOUT,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DetectorNets {
    /// Single-logit network; score is its sigmoid.
    Classifier { net: Module },
    Autoencoder {
        encoder: Module,
        decoder: Module,
        code_size: usize,
        variational: bool,
        /// Standardization of the reconstruction errors fed to the SVM, from the genuine SVM-training maps.
        #[serde(default)]
        error_stats: Option<NormStats>,
    },
    KernelDensity {
        /// Victim hidden features of the reference samples, indexed by class.
        reference: [Tensor; 2],
        bandwidth: f64,
        logistic: LogisticModel,
    },
    MlLoo { logistic: LogisticModel, input_stats: NormStats },
}

/// What a detector was trained on; checked on every `detect` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub estimator: Option<Estimator>,
    pub background_id: Option<String>,
    pub input_shape: Vec<usize>,
    pub victim: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub nets: DetectorNets,
    pub svm: Option<SvmModel>,
    /// Standardization of the detector input: maps for SHAP detectors, scalar features for baselines.
    pub norm_stats: NormStats,
    pub threshold: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Genuine,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    /// Higher means more adversarial.
    pub score: f64,
    pub label: Verdict,
}

pub enum DetectorInput<'a> {
    Maps(&'a MapSet),
    Samples { victim: &'a VictimModel, xs: &'a Tensor },
}

impl DetectorModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "detector", self)
    }

    pub fn load(path: &Path) -> Result<DetectorModel> {
        checkpoint::load(path, "detector")
    }

    fn check_maps(&self, maps: &MapSet) -> Result<()> {
        let p = &self.provenance;
        if p.estimator != Some(maps.estimator) {
            return Err(Error::Provenance(format!(
                "{} detector was trained on {} maps but received {} maps",
                self.kind.name(),
                p.estimator.map_or("raw-sample", |e| e.name()),
                maps.estimator.name()
            )));
        }
        if p.background_id != maps.background_id {
            return Err(Error::Provenance(format!(
                "{} detector was trained with a different attribution background",
                self.kind.name()
            )));
        }
        if maps.sample_shape() != p.input_shape.as_slice() {
            return Err(Error::shape("detector input", format!("{:?}", p.input_shape), maps.values.shape()));
        }
        Ok(())
    }

    fn check_victim(&self, victim: &VictimModel, xs: &Tensor) -> Result<()> {
        if self.provenance.victim.as_deref() != Some(victim.fingerprint().as_str()) {
            return Err(Error::Provenance(format!(
                "{} detector was trained against a different victim",
                self.kind.name()
            )));
        }
        if xs.rank() < 2 || xs.shape()[1..] != self.provenance.input_shape[..] {
            return Err(Error::shape(
                "detector input",
                format!("[batch, ..{:?}]", self.provenance.input_shape),
                xs.shape(),
            ));
        }
        Ok(())
    }

    /// Raw scores, one per sample; higher means more adversarial.
    pub fn scores(&self, input: &DetectorInput<'_>) -> Result<Vec<f64>> {
        match (&self.nets, input) {
            (DetectorNets::Classifier { net }, DetectorInput::Maps(maps)) => {
                self.check_maps(maps)?;
                let x = standardize(&maps.values, &self.norm_stats)?;
                Ok(train::logits(net, &x)?.into_iter().map(sigmoid).collect())
            }
            (DetectorNets::Autoencoder { error_stats, .. }, DetectorInput::Maps(maps)) => {
                let (Some(svm), Some(stats)) = (&self.svm, error_stats) else {
                    return Err(Error::invalid(format!("{} detector has no SVM attached", self.kind.name())));
                };
                svm.decision_batch(&standardize(&reconstruction_features(self, maps)?, stats)?)
            }
            (DetectorNets::KernelDensity { reference, bandwidth, .. }, DetectorInput::Samples { victim, xs }) => {
                self.check_victim(victim, xs)?;
                let feats = baselines::kde_features(victim, reference, *bandwidth, xs)?;
                self.score_features(feats.into_iter().map(|f| vec![f]).collect())
            }
            (DetectorNets::MlLoo { input_stats, .. }, DetectorInput::Samples { victim, xs }) => {
                self.check_victim(victim, xs)?;
                self.score_features(ml_loo_features(victim, input_stats, xs)?)
            }
            _ => Err(Error::invalid(format!(
                "{} detector received the wrong input kind (maps versus raw samples)",
                self.kind.name()
            ))),
        }
    }

    /// Scores precomputed baseline features (log-densities or ML-LOO statistics).
    pub fn score_features(&self, feats: Vec<Vec<f64>>) -> Result<Vec<f64>> {
        let logistic = match &self.nets {
            DetectorNets::KernelDensity { logistic, .. } | DetectorNets::MlLoo { logistic, .. } => logistic,
            _ => return Err(Error::invalid(format!("{} detector does not score scalar features", self.kind.name()))),
        };
        let d = self.norm_stats.dim();
        if feats.iter().any(|f| f.len() != d) {
            return Err(Error::invalid(format!("{} detector expects {d} features per sample", self.kind.name())));
        }
        let flat = Tensor::new(vec![feats.len(), d], feats.concat())?;
        let z = standardize(&flat, &self.norm_stats)?;
        Ok((0..z.batch_len()).map(|i| logistic.probability(z.sample(i))).collect())
    }
}

/// Scores and thresholded labels for every sample of `input`.
pub fn detect(det: &DetectorModel, input: &DetectorInput<'_>) -> Result<Vec<DetectorVerdict>> {
    Ok(det
        .scores(input)?
        .into_iter()
        .map(|score| DetectorVerdict {
            score,
            label: if score >= det.threshold { Verdict::Adversarial } else { Verdict::Genuine },
        })
        .collect())
}

fn check_pair(genuine: &MapSet, adversarial: &MapSet) -> Result<()> {
    if genuine.is_empty() || adversarial.is_empty() {
        return Err(Error::invalid("detector training needs genuine and adversarial maps"));
    }
    if genuine.origin != Origin::Genuine || adversarial.origin != Origin::Adversarial {
        return Err(Error::invalid("map sets passed in the wrong role (genuine versus adversarial)"));
    }
    if genuine.estimator != adversarial.estimator || genuine.background_id != adversarial.background_id {
        return Err(Error::Provenance("genuine and adversarial maps come from different estimators".into()));
    }
    if genuine.sample_shape() != adversarial.sample_shape() {
        return Err(Error::shape(
            "adversarial maps",
            format!("{:?}", genuine.sample_shape()),
            adversarial.values.shape(),
        ));
    }
    Ok(())
}

fn map_provenance(maps: &MapSet) -> Provenance {
    Provenance {
        estimator: Some(maps.estimator),
        background_id: maps.background_id.clone(),
        input_shape: maps.sample_shape().to_vec(),
        victim: None,
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.batch_len();
    Tensor::new(shape, [a.data(), b.data()].concat())
}

fn train_classifier(
    kind: DetectorKind,
    mut net: Module,
    genuine: &MapSet,
    adversarial: &MapSet,
    cfg: &DetectorConfig,
) -> Result<DetectorModel> {
    let norm_stats = NormStats::compute(&genuine.values)?;
    let x = concat(
        &standardize(&genuine.values, &norm_stats)?,
        &standardize(&adversarial.values, &norm_stats)?,
    )?;
    let labels: Vec<f64> = (0..x.batch_len()).map(|i| if i < genuine.len() { 0.0 } else { 1.0 }).collect();
    fit_binary(&mut net, &x, &labels, &cfg.train_config())?;
    Ok(DetectorModel {
        kind,
        nets: DetectorNets::Classifier { net },
        svm: None,
        norm_stats,
        threshold: 0.5,
        provenance: map_provenance(genuine),
    })
}

/// Single-hidden-layer MLP over flattened maps.
pub fn train_shap_mlp(genuine: &MapSet, adversarial: &MapSet, cfg: &DetectorConfig) -> Result<DetectorModel> {
    check_pair(genuine, adversarial)?;
    let m = genuine.values.sample_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Module::sequential(vec![
        Module::Flatten,
        Module::dense(m, cfg.hidden_dim, &mut rng),
        Module::Relu,
        Module::dense(cfg.hidden_dim, 1, &mut rng),
    ]);
    train_classifier(DetectorKind::ShapMlp, net, genuine, adversarial, cfg)
}

/// Flattened width after the two conv/pool stages for a `side × side` map.
pub fn shap_conv_flat_dim(side: usize) -> usize {
    32 * cnn_feature_side(side).pow(2)
}

pub fn shap_conv_net(channels: usize, side: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Module> {
    if side < 16 {
        return Err(Error::invalid(format!("shap_conv needs maps of side >= 16 (got {side})")));
    }
    Ok(Module::sequential(vec![
        Module::conv2d(channels, 16, 5, rng),
        Module::Relu,
        Module::maxpool2d(2, 2),
        Module::conv2d(16, 32, 5, rng),
        Module::Relu,
        Module::maxpool2d(2, 2),
        Module::dropout(dropout)?,
        Module::Flatten,
        Module::dense(shap_conv_flat_dim(side), 256, rng),
        Module::Relu,
        Module::dense(256, 84, rng),
        Module::Relu,
        Module::dropout(dropout)?,
        Module::dense(84, 1, rng),
    ]))
}

/// CNN over image-shaped maps `[channels, side, side]`.
pub fn train_shap_conv(genuine: &MapSet, adversarial: &MapSet, cfg: &DetectorConfig) -> Result<DetectorModel> {
    check_pair(genuine, adversarial)?;
    let shape = genuine.sample_shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape("shap_conv", "image-shaped maps [channels, side, side]", shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = shap_conv_net(shape[0], shape[1], cfg.dropout, &mut rng)?;
    train_classifier(DetectorKind::ShapConv, net, genuine, adversarial, cfg)
}
