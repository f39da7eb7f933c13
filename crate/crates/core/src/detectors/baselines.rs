use super::logistic::fit_logistic;
use super::{DetectorKind, DetectorModel, DetectorNets, Provenance};
use crate::attribution::{loo_attribution, ScalarModel};
use crate::data::{standardize, unstandardize, NormStats};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::stats::iqr;
use crate::victims::VictimModel;

/// Upper bound on input features plus hidden units for leave-one-out features.
pub const MAX_LOO_TAPS: usize = 4096;

/// Log of a Gaussian-kernel density estimate over the rows of `reference`, evaluated at `x`.
pub fn kde_log_density(reference: &Tensor, x: &[f64], bandwidth: f64) -> f64 {
    let d = x.len() as f64;
    let n = reference.batch_len();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let exps: Vec<f64> = (0..n)
        .map(|i| -reference.sample(i).iter().zip(x).map(|(r, v)| (r - v) * (r - v)).sum::<f64>() * inv)
        .collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    lse - (n as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * bandwidth * bandwidth).ln()
}

/// Log-density of each sample's hidden features under the KDE of its predicted class.
pub fn kde_features(victim: &VictimModel, reference: &[Tensor; 2], bandwidth: f64, xs: &Tensor) -> Result<Vec<f64>> {
    let h = victim.hidden_features(xs)?;
    let labels = victim.head_logits(&h)?;
    Ok((0..h.batch_len())
        .map(|i| {
            let class = usize::from(labels[i] >= 0.0);
            kde_log_density(&reference[class], h.sample(i), bandwidth)
        })
        .collect())
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch_len()).map(|i| t.sample(i).to_vec()).collect()
}

fn fit_on_features(
    kind: DetectorKind,
    nets: impl FnOnce(super::LogisticModel) -> DetectorNets,
    genuine: Vec<Vec<f64>>,
    adversarial: Vec<Vec<f64>>,
    victim: &VictimModel,
) -> Result<DetectorModel> {
    if genuine.is_empty() || adversarial.is_empty() {
        return Err(Error::invalid("detector training needs genuine and adversarial samples"));
    }
    let d = genuine[0].len();
    let g = Tensor::new(vec![genuine.len(), d], genuine.concat())?;
    let a = Tensor::new(vec![adversarial.len(), d], adversarial.concat())?;
    let norm_stats = NormStats::compute(&g)?;
    let mut rows = to_rows(&standardize(&g, &norm_stats)?);
    rows.extend(to_rows(&standardize(&a, &norm_stats)?));
    let ys: Vec<u8> = (0..rows.len()).map(|i| u8::from(i >= genuine.len())).collect();
    let logistic = fit_logistic(&rows, &ys)?;
    Ok(DetectorModel {
        kind,
        nets: nets(logistic),
        svm: None,
        norm_stats,
        threshold: 0.5,
        provenance: Provenance {
            estimator: None,
            background_id: None,
            input_shape: victim.sample_shape(),
            victim: Some(victim.fingerprint()),
        },
    })
}

/// Kernel density on final hidden features per class, then logistic regression on the log-density.
///
/// `reference` / `reference_labels` are the victim's training-split samples that define the densities.
pub fn train_kernel_density_detector(
    victim: &VictimModel,
    reference: &Tensor,
    reference_labels: &[u8],
    genuine_train: &Tensor,
    adversarial_train: &Tensor,
    bandwidth: f64,
) -> Result<DetectorModel> {
    if bandwidth <= 0.0 {
        return Err(Error::invalid("kernel bandwidth must be positive"));
    }
    if genuine_train.batch_len() == 0 || adversarial_train.batch_len() == 0 {
        return Err(Error::invalid("kernel-density training needs genuine and adversarial samples"));
    }
    let refs = kde_reference(victim, reference, reference_labels)?;
    let g = kde_features(victim, &refs, bandwidth, genuine_train)?;
    let a = kde_features(victim, &refs, bandwidth, adversarial_train)?;
    train_kernel_density_from_features(victim, refs, bandwidth, &g, &a)
}

/// Victim hidden features of the reference samples, split by label.
pub fn kde_reference(victim: &VictimModel, reference: &Tensor, reference_labels: &[u8]) -> Result<[Tensor; 2]> {
    if reference.batch_len() != reference_labels.len() {
        return Err(Error::invalid("one label per kernel-density reference sample is required"));
    }
    let h = victim.hidden_features(reference)?;
    let by_class = |c: u8| -> Result<Tensor> {
        let idx: Vec<usize> = (0..reference_labels.len()).filter(|&i| reference_labels[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!("kernel-density reference has no class-{c} samples")));
        }
        Ok(h.select(&idx))
    };
    Ok([by_class(0)?, by_class(1)?])
}

/// Fits the logistic stage on precomputed log-densities (see [`kde_features`]).
pub fn train_kernel_density_from_features(
    victim: &VictimModel,
    reference: [Tensor; 2],
    bandwidth: f64,
    genuine: &[f64],
    adversarial: &[f64],
) -> Result<DetectorModel> {
    fit_on_features(
        DetectorKind::KernelDensity,
        |logistic| DetectorNets::KernelDensity {
            reference,
            bandwidth,
            logistic,
        },
        genuine.iter().map(|&v| vec![v]).collect(),
        adversarial.iter().map(|&v| vec![v]).collect(),
        victim,
    )
}

/// Logit of `class` as a function of the input. Logits rather than probabilities, because a
/// saturated victim flattens probability differences to nothing. Takes standardized inputs, so a zero baseline replaces a feature by its training mean.
struct InputClassLogit<'a> {
    victim: &'a VictimModel,
    stats: &'a NormStats,
    class: u8,
}

impl ScalarModel for InputClassLogit<'_> {
    fn eval(&self, zs: &Tensor) -> Result<Vec<f64>> {
        let xs = unstandardize(zs, self.stats)?;
        Ok(class_logit(self.victim.logits(&xs)?, self.class))
    }
}

/// Logit of `class` as a function of the final hidden features.
struct HiddenClassLogit<'a> {
    victim: &'a VictimModel,
    class: u8,
}

impl ScalarModel for HiddenClassLogit<'_> {
    fn eval(&self, hs: &Tensor) -> Result<Vec<f64>> {
        Ok(class_logit(self.victim.head_logits(hs)?, self.class))
    }
}

fn class_logit(logits: Vec<f64>, class: u8) -> Vec<f64> {
    logits
        .into_iter()
        .map(|z| if class == 1 { z } else { -z })
        .collect()
}

/// `[IQR of input LOO map, IQR of hidden-layer LOO map]` per sample. Inputs are left out in
/// standardized space (`input_stats`, from the training split), hidden units are zeroed.
pub fn ml_loo_features(victim: &VictimModel, input_stats: &NormStats, xs: &Tensor) -> Result<Vec<Vec<f64>>> {
    if input_stats.dim() != xs.sample_len() {
        return Err(Error::shape(
            "ml_loo_features",
            format!("{} input features per sample", input_stats.dim()),
            xs.shape(),
        ));
    }
    let h = victim.hidden_features(xs)?;
    let taps = xs.sample_len() + h.sample_len();
    if taps > MAX_LOO_TAPS {
        return Err(Error::invalid(format!(
            "ML-LOO needs one forward pass per feature and hidden unit; {taps} taps exceed the limit of {MAX_LOO_TAPS}"
        )));
    }
    let logits = victim.head_logits(&h)?;
    let shape = victim.sample_shape();
    let zs = standardize(xs, input_stats)?;
    let mut out = Vec::with_capacity(xs.batch_len());
    for i in 0..xs.batch_len() {
        let class = u8::from(logits[i] >= 0.0);
        let z = Tensor::new(shape.clone(), zs.sample(i).to_vec())?;
        let input = loo_attribution(&InputClassLogit { victim, stats: input_stats, class }, &z, 0.0)?;
        let hidden = Tensor::new(vec![h.sample_len()], h.sample(i).to_vec())?;
        let inner = loo_attribution(&HiddenClassLogit { victim, class }, &hidden, 0.0)?;
        out.push(vec![iqr(input.values.data())?, iqr(inner.values.data())?]);
    }
    Ok(out)
}

/// Leave-one-out maps at the input and final hidden layer, summarized by their IQR, then logistic regression.
pub fn train_ml_loo_detector(
    victim: &VictimModel,
    input_stats: &NormStats,
    genuine_train: &Tensor,
    adversarial_train: &Tensor,
) -> Result<DetectorModel> {
    let g = ml_loo_features(victim, input_stats, genuine_train)?;
    let a = ml_loo_features(victim, input_stats, adversarial_train)?;
    train_ml_loo_from_features(victim, input_stats.clone(), g, a)
}

/// Fits the logistic stage on precomputed features (see [`ml_loo_features`]).
pub fn train_ml_loo_from_features(
    victim: &VictimModel,
    input_stats: NormStats,
    genuine: Vec<Vec<f64>>,
    adversarial: Vec<Vec<f64>>,
) -> Result<DetectorModel> {
    let nets = |logistic| DetectorNets::MlLoo { logistic, input_stats };
    fit_on_features(DetectorKind::MlLoo, nets, genuine, adversarial, victim)
}

#[cfg(test)]
mod tests {
    use super::super::{detect, DetectorInput};
    use super::*;
    use crate::data::gen_tabular;
    use crate::victims::{train_victim, VictimConfig};

    #[test]
    fn single_point_density_is_normalization_constant() {
        for d in [1usize, 3, 16] {
            let p = Tensor::new(vec![1, d], vec![0.7; d]).unwrap();
            let got = kde_log_density(&p, &vec![0.7; d], 0.1);
            let want = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * 0.01).ln();
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn baselines_train_and_check_provenance() {
        let ds = gen_tabular(400, 12, 5).unwrap().standardized().unwrap();
        let mut cfg = VictimConfig::for_task(ds.kind);
        cfg.train.epochs = 10;
        let victim = train_victim(&ds, &cfg).unwrap();
        let (tx, ty) = ds.train();
        let (test_x, _) = ds.test();
        let genuine = test_x.select(&(0..30).collect::<Vec<_>>());
        // Far-off inputs stand in for adversarial samples.
        let adversarial = genuine.map(|v| v * 6.0 + 3.0);
        let kde = train_kernel_density_detector(&victim, &tx, &ty, &genuine, &adversarial, 0.1).unwrap();
        let loo = train_ml_loo_detector(&victim, &NormStats::identity(12), &genuine, &adversarial).unwrap();
        for det in [&kde, &loo] {
            let v = detect(det, &DetectorInput::Samples { victim: &victim, xs: &genuine }).unwrap();
            assert_eq!(v.len(), 30);
        }
        let mut other_cfg = cfg.clone();
        other_cfg.train.seed = 9;
        let other = train_victim(&ds, &other_cfg).unwrap();
        assert!(detect(&kde, &DetectorInput::Samples { victim: &other, xs: &genuine }).is_err());
    }

    #[test]
    fn ml_loo_rejects_too_many_taps() {
        let ds = crate::data::gen_images(20, 72, 1, 1).unwrap();
        let mut cfg = VictimConfig::for_task(ds.kind);
        cfg.train.epochs = 0;
        cfg.min_accuracy = 0.0;
        let victim = train_victim(&ds, &cfg).unwrap();
        let stats = NormStats::compute(&ds.features).unwrap();
        let err = ml_loo_features(&victim, &stats, &ds.features.select(&[0])).unwrap_err();
        assert!(err.to_string().contains("forward pass"));
    }

    #[test]
    fn input_loo_replaces_features_by_their_mean() {
        let ds = gen_tabular(300, 6, 2).unwrap();
        let mut cfg = VictimConfig::for_task(ds.kind);
        cfg.train.epochs = 5;
        cfg.min_accuracy = 0.0;
        let victim = train_victim(&ds, &cfg).unwrap();
        let stats = NormStats::compute(&ds.features).unwrap();
        let x = ds.features.select(&[4]);
        let class = u8::from(victim.logits(&x).unwrap()[0] >= 0.0);
        let logit = |t: &Tensor| {
            let z = victim.logits(t).unwrap()[0];
            if class == 1 { z } else { -z }
        };
        // Direct oracle: swap each raw feature for its mean and record the drop in the class logit.
        let mut drops: Vec<f64> = (0..6)
            .map(|j| {
                let mut v = x.data().to_vec();
                v[j] = stats.mean[j];
                logit(&x) - logit(&Tensor::new(vec![1, 6], v).unwrap())
            })
            .collect();
        drops.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * 5.0;
            let (lo, f) = (h.floor() as usize, h - h.floor());
            drops[lo] + f * (drops[(lo + 1).min(5)] - drops[lo])
        };
        let got = ml_loo_features(&victim, &stats, &x).unwrap();
        assert!((got[0][0] - (q(0.75) - q(0.25))).abs() < 1e-12);
    }
}
