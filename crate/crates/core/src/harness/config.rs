use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackMethod};
use crate::attribution::{Estimator, DEFAULT_BACKGROUND_SIZE};
use crate::data::DataKind;
use crate::detectors::{DetectorConfig, DetectorKind, MAX_LOO_TAPS};
use crate::error::{Error, Result};
use crate::victims::{VictimConfig, MIN_VICTIM_ACCURACY};

/// A complete, explicitly seeded experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Parent of the timestamped run directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds dataset generation, victim training, attacks and the attribution background.
    pub seed: u64,
    /// One detector train/test split and initialization per seed.
    #[serde(default = "default_detector_seeds")]
    pub detector_seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub victim: VictimSpec,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub attribution: AttributionSpec,
    #[serde(default)]
    pub detectors: DetectorSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_detector_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic Gaussian-cluster records, standardized with training-split statistics.
    Tabular { n: usize, features: usize },
    /// Synthetic blob images in [0, 1].
    Image {
        n: usize,
        side: usize,
        #[serde(default = "one")]
        channels: usize,
    },
    /// A labeled CSV file (standardized like the synthetic records).
    Csv { path: PathBuf },
    /// A labeled raster file of images.
    Raster { path: PathBuf },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSpec {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub min_accuracy: Option<f64>,
}

impl VictimSpec {
    pub fn resolve(&self, task: DataKind, seed: u64) -> VictimConfig {
        let mut cfg = VictimConfig::for_task(task);
        cfg.train.seed = seed;
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        cfg.min_accuracy = self.min_accuracy.unwrap_or(MIN_VICTIM_ACCURACY);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// `pgd`, `cw` or `saliency_sparse`.
    pub method: String,
    pub epsilon: Option<f64>,
    pub step_size: Option<f64>,
    pub max_iters: Option<usize>,
    pub random_start: Option<bool>,
    pub c_init: Option<f64>,
    pub binary_search_steps: Option<usize>,
    pub kappa: Option<f64>,
    pub cw_lr: Option<f64>,
    /// Feature budget of the sparse attack.
    pub budget: Option<usize>,
    pub sparse_step: Option<f64>,
    pub clamp: Option<[f64; 2]>,
}

impl AttackSpec {
    pub fn method(&self) -> Result<AttackMethod> {
        AttackMethod::parse(&self.method)
    }

    pub fn resolve(&self, seed: u64) -> Result<AttackConfig> {
        let mut cfg = match self.method()? {
            AttackMethod::Pgd => AttackConfig::pgd(self.epsilon.unwrap_or(0.1)),
            AttackMethod::Cw => AttackConfig::cw(),
            AttackMethod::SaliencySparse => AttackConfig::saliency_sparse(self.budget.unwrap_or(5)),
        };
        cfg.seed = seed;
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.random_start {
            cfg.random_start = v;
        }
        if let Some(v) = self.c_init {
            cfg.c_init = v;
        }
        if let Some(v) = self.binary_search_steps {
            cfg.binary_search_steps = v;
        }
        if let Some(v) = self.kappa {
            cfg.kappa = v;
        }
        if let Some(v) = self.cw_lr {
            cfg.cw_lr = v;
        }
        if let Some(v) = self.budget {
            cfg.max_perturbed_features = v;
            if cfg.method == AttackMethod::SaliencySparse {
                cfg.max_iters = v;
            }
        }
        if let Some(v) = self.sparse_step {
            cfg.sparse_step = v;
        }
        if let Some([lo, hi]) = self.clamp {
            cfg.clamp = (lo, hi);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSpec {
    /// Only `gradient` scales to the detector pipelines.
    pub estimator: String,
    pub background_size: usize,
    /// α draws per background sample.
    pub n_path_samples: usize,
    /// Shared on-disk cache; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl Default for AttributionSpec {
    fn default() -> Self {
        AttributionSpec {
            estimator: "gradient".into(),
            background_size: DEFAULT_BACKGROUND_SIZE,
            n_path_samples: 1,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSpec {
    /// Detector kinds to run; empty means every kind applicable to the task.
    pub kinds: Vec<String>,
    pub train_fraction: f64,
    /// Cap on attacked samples (taken in test-split order).
    pub max_samples: Option<usize>,
    pub mlp_hidden: usize,
    pub lr: f64,
    pub conv_lr: f64,
    pub batch_size: usize,
    pub mlp_epochs: usize,
    pub conv_epochs: usize,
    pub ae_epochs: usize,
    /// Correctly classified training-split samples whose maps train the autoencoders.
    pub ae_samples: usize,
    pub ae_code: usize,
    pub vae_code: usize,
    pub ae_hidden: Option<[usize; 2]>,
    pub svm_c: f64,
    pub bandwidth: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        let base = DetectorConfig::for_kind(DetectorKind::ShapMlp);
        DetectorSpec {
            kinds: Vec::new(),
            train_fraction: 0.8,
            max_samples: None,
            mlp_hidden: base.hidden_dim,
            lr: base.lr,
            conv_lr: crate::detectors::CONV_LR,
            batch_size: base.batch_size,
            mlp_epochs: 30,
            conv_epochs: 15,
            ae_epochs: 60,
            ae_samples: 400,
            ae_code: crate::detectors::AE_CODE_SIZE,
            vae_code: crate::detectors::VAE_CODE_SIZE,
            ae_hidden: None,
            svm_c: base.svm_c,
            bandwidth: base.bandwidth,
        }
    }
}

impl DetectorSpec {
    pub fn config(&self, kind: DetectorKind, seed: u64) -> DetectorConfig {
        let mut cfg = DetectorConfig::for_kind(kind);
        cfg.seed = seed;
        cfg.hidden_dim = self.mlp_hidden;
        cfg.lr = if kind == DetectorKind::ShapConv { self.conv_lr } else { self.lr };
        cfg.batch_size = self.batch_size;
        cfg.svm_c = self.svm_c;
        cfg.bandwidth = self.bandwidth;
        cfg.ae_hidden = self.ae_hidden.map(|[a, b]| (a, b));
        cfg.epochs = match kind {
            DetectorKind::ShapConv => self.conv_epochs,
            DetectorKind::ShapAeSvm | DetectorKind::ShapVaeSvm => self.ae_epochs,
            _ => self.mlp_epochs,
        };
        cfg.code_size = if kind == DetectorKind::ShapVaeSvm { self.vae_code } else { self.ae_code };
        cfg
    }

    /// Requested kinds that apply to `task` (SHAP-Conv needs images; ML-LOO a bounded tap count).
    pub fn resolve_kinds(&self, task: DataKind, hidden_width: usize) -> Result<Vec<DetectorKind>> {
        let requested: Vec<DetectorKind> = if self.kinds.is_empty() {
            DetectorKind::ALL.to_vec()
        } else {
            self.kinds.iter().map(|k| DetectorKind::parse(k)).collect::<Result<_>>()?
        };
        let explicit = !self.kinds.is_empty();
        let mut out = Vec::new();
        for kind in requested {
            let applicable = match kind {
                DetectorKind::ShapConv => task.is_image(),
                DetectorKind::MlLoo => task.feature_count() + hidden_width <= MAX_LOO_TAPS,
                _ => true,
            };
            if applicable {
                out.push(kind);
            } else if explicit {
                return Err(Error::Config(format!("detector {} does not apply to this dataset", kind.name())));
            }
        }
        Ok(out)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative dataset paths resolve against the config file's directory.
        if let DatasetSpec::Csv { path: p } | DatasetSpec::Raster { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("experiment name '{}' must be a nonempty plain file name", self.name));
        }
        if self.attacks.is_empty() {
            return bad("at least one attack is required".into());
        }
        if self.detector_seeds.is_empty() {
            return bad("at least one detector seed is required".into());
        }
        for a in &self.attacks {
            a.resolve(self.seed)?;
        }
        if Estimator::parse(&self.attribution.estimator)? != Estimator::Gradient {
            return bad("experiments use the gradient estimator; the others serve as test oracles".into());
        }
        if self.attribution.background_size == 0 || self.attribution.n_path_samples == 0 {
            return bad("background_size and n_path_samples must be positive".into());
        }
        let f = self.detectors.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("train_fraction {f} must lie strictly between 0 and 1"));
        }
        if self.detectors.ae_samples < 10 {
            return bad(format!("ae_samples {} must be at least 10", self.detectors.ae_samples));
        }
        for k in &self.detectors.kinds {
            DetectorKind::parse(k)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
name = "demo"
seed = 3

[dataset]
kind = "image"
n = 200
side = 20

[[attacks]]
method = "pgd"
epsilon = 0.1

[[attacks]]
method = "cw"
max_iters = 50
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.detector_seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.attribution.background_size, 64);
        assert_eq!(cfg.detectors.mlp_hidden, 160);
        assert_eq!(cfg.dataset, DatasetSpec::Image { n: 200, side: 20, channels: 1 });
        let cw = cfg.attacks[1].resolve(cfg.seed).unwrap();
        assert_eq!((cw.method, cw.max_iters, cw.seed), (AttackMethod::Cw, 50, 3));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml(&format!("{EXAMPLE}\nbogus = 1\n")).is_err());
        let bad_attack = EXAMPLE.replace("method = \"cw\"", "method = \"fgsm\"");
        assert!(ExperimentConfig::from_toml(&bad_attack).is_err());
        let bad_estimator = format!("{EXAMPLE}\n[attribution]\nestimator = \"exact\"\n");
        assert!(ExperimentConfig::from_toml(&bad_estimator).is_err());
    }

    #[test]
    fn kinds_filtered_by_task() {
        let spec = DetectorSpec::default();
        let tab = spec.resolve_kinds(DataKind::Tabular { features: 10 }, 16).unwrap();
        assert!(!tab.contains(&DetectorKind::ShapConv));
        let img = spec.resolve_kinds(DataKind::Image { channels: 1, side: 28 }, 32).unwrap();
        assert_eq!(img.len(), 6);
        let explicit = DetectorSpec {
            kinds: vec!["shap_conv".into()],
            ..DetectorSpec::default()
        };
        assert!(explicit.resolve_kinds(DataKind::Tabular { features: 10 }, 16).is_err());
    }
}
