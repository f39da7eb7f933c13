//! Per-feature importance: exact and permutation-sampled Shapley values under the
//! interventional value function, gradient-path SHAP, and leave-one-out.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{train, Module, Tensor};
use crate::victims::VictimModel;

/// Largest feature count `exact_shap` will enumerate.
pub const MAX_EXACT_FEATURES: usize = 15;
pub const DEFAULT_BACKGROUND_SIZE: usize = 64;
const EVAL_CHUNK: usize = 4096;

/// A scalar-valued function over batches of samples.
pub trait ScalarModel {
    /// One output per sample of `xs: [batch, ..sample_shape]`.
    fn eval(&self, xs: &Tensor) -> Result<Vec<f64>>;
}

pub trait GradModel: ScalarModel {
    /// Outputs and per-sample input gradients.
    fn eval_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

impl ScalarModel for VictimModel {
    fn eval(&self, xs: &Tensor) -> Result<Vec<f64>> {
        self.logits(xs)
    }
}

impl GradModel for VictimModel {
    fn eval_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.logit_input_grad(xs, &vec![1.0; xs.batch_len()])
    }
}

impl ScalarModel for Module {
    fn eval(&self, xs: &Tensor) -> Result<Vec<f64>> {
        train::logits(self, xs)
    }
}

impl GradModel for Module {
    fn eval_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        train::logit_input_grad(self, xs, &vec![1.0; xs.batch_len()])
    }
}

/// Adapts a closure over one flattened sample.
pub struct FnModel<F>(pub F);

impl<F: Fn(&[f64]) -> f64> ScalarModel for FnModel<F> {
    fn eval(&self, xs: &Tensor) -> Result<Vec<f64>> {
        Ok((0..xs.batch_len()).map(|i| (self.0)(xs.sample(i))).collect())
    }
}

/// Counts the samples passed through the wrapped model.
pub struct CountingModel<'a, M: ?Sized> {
    inner: &'a M,
    calls: Cell<usize>,
}

impl<'a, M: ScalarModel + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: ScalarModel + ?Sized> ScalarModel for CountingModel<'_, M> {
    fn eval(&self, xs: &Tensor) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + xs.batch_len());
        self.inner.eval(xs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Sampling,
    Gradient,
    Loo,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::Sampling => "sampling",
            Estimator::Gradient => "gradient",
            Estimator::Loo => "loo",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        match s {
            "exact" => Ok(Estimator::Exact),
            "sampling" => Ok(Estimator::Sampling),
            "gradient" => Ok(Estimator::Gradient),
            "loo" => Ok(Estimator::Loo),
            other => Err(Error::invalid(format!("unknown attribution estimator '{other}'"))),
        }
    }
}

/// Reference inputs defining the expectation in the value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    samples: Tensor,
    id: String,
}

impl BackgroundSet {
    pub fn new(samples: Tensor) -> Result<BackgroundSet> {
        if samples.rank() < 2 || samples.batch_len() == 0 {
            return Err(Error::invalid("background set must hold at least one sample"));
        }
        let id = hex::encode(Sha256::digest(samples.content_bytes()));
        Ok(BackgroundSet { samples, id })
    }

    /// Draws `size` distinct samples (or all, if fewer) from a training split.
    pub fn from_training(train: &Tensor, size: usize, seed: u64) -> Result<BackgroundSet> {
        let n = train.batch_len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(size.min(n));
        idx.sort_unstable();
        BackgroundSet::new(train.select(&idx))
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn size(&self) -> usize {
        self.samples.batch_len()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// φ_i, shaped like one input sample.
    pub values: Tensor,
    pub base_value: f64,
    pub estimator: Estimator,
    pub background_id: Option<String>,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.data().iter().sum()
    }
}

fn check_sample(x: &Tensor, bg: &BackgroundSet) -> Result<()> {
    if x.shape() != bg.sample_shape() {
        return Err(Error::shape("attribution input", format!("{:?}", bg.sample_shape()), x.shape()));
    }
    Ok(())
}

fn eval_chunked<M: ScalarModel + ?Sized>(f: &M, rows: &[f64], sample_shape: &[usize]) -> Result<Vec<f64>> {
    let m: usize = sample_shape.iter().product();
    let mut out = Vec::with_capacity(rows.len() / m.max(1));
    for chunk in rows.chunks(EVAL_CHUNK * m.max(1)) {
        let mut shape = vec![chunk.len() / m.max(1)];
        shape.extend_from_slice(sample_shape);
        out.extend(f.eval(&Tensor::new(shape, chunk.to_vec())?)?);
    }
    Ok(out)
}

/// Interventional values `v(S)` for a list of coalitions, each a per-feature membership mask.
fn coalition_values<M: ScalarModel + ?Sized>(f: &M, x: &Tensor, bg: &BackgroundSet, masks: &[Vec<bool>]) -> Result<Vec<f64>> {
    let m = x.len();
    let nb = bg.size();
    let mut rows = Vec::with_capacity(masks.len() * nb * m);
    for mask in masks {
        for b in 0..nb {
            let bs = bg.samples.sample(b);
            rows.extend((0..m).map(|i| if mask[i] { x.data()[i] } else { bs[i] }));
        }
    }
    let outs = eval_chunked(f, &rows, bg.sample_shape())?;
    Ok(outs.chunks(nb).map(|c| c.iter().sum::<f64>() / nb as f64).collect())
}

/// Brute-force Shapley values over all 2^M coalitions.
pub fn exact_shap<M: ScalarModel + ?Sized>(f: &M, x: &Tensor, bg: &BackgroundSet) -> Result<AttributionMap> {
    check_sample(x, bg)?;
    let m = x.len();
    if m > MAX_EXACT_FEATURES {
        return Err(Error::invalid(format!(
            "exact_shap enumerates 2^M coalitions and supports at most {MAX_EXACT_FEATURES} features (got {m}); use sampling_shap"
        )));
    }
    let masks: Vec<Vec<bool>> = (0..1usize << m).map(|s| (0..m).map(|i| s >> i & 1 == 1).collect()).collect();
    let v = coalition_values(f, x, bg, &masks)?;
    // w(s) = s!(M-s-1)!/M!
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();
    let mut phi = vec![0.0; m];
    for (s, &vs) in v.iter().enumerate() {
        for (i, p) in phi.iter_mut().enumerate() {
            if s >> i & 1 == 0 {
                let size = (s as u32).count_ones() as usize;
                *p += weight[size] * (v[s | 1 << i] - vs);
            }
        }
    }
    Ok(AttributionMap {
        values: Tensor::new(x.shape().to_vec(), phi)?,
        base_value: v[0],
        estimator: Estimator::Exact,
        background_id: Some(bg.id.clone()),
    })
}

/// Monte-Carlo Shapley values from random feature orderings.
pub fn sampling_shap<M: ScalarModel + ?Sized>(
    f: &M,
    x: &Tensor,
    bg: &BackgroundSet,
    n_permutations: usize,
    seed: u64,
) -> Result<AttributionMap> {
    check_sample(x, bg)?;
    if n_permutations == 0 {
        return Err(Error::invalid("sampling_shap needs at least one permutation"));
    }
    let m = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = vec![0.0; m];
    let mut base = 0.0;
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..n_permutations {
        order.shuffle(&mut rng);
        let mut mask = vec![false; m];
        let mut masks = vec![mask.clone()];
        for &i in &order {
            mask[i] = true;
            masks.push(mask.clone());
        }
        let v = coalition_values(f, x, bg, &masks)?;
        for (k, &i) in order.iter().enumerate() {
            phi[i] += v[k + 1] - v[k];
        }
        base = v[0];
    }
    phi.iter_mut().for_each(|p| *p /= n_permutations as f64);
    Ok(AttributionMap {
        values: Tensor::new(x.shape().to_vec(), phi)?,
        base_value: base,
        estimator: Estimator::Sampling,
        background_id: Some(bg.id.clone()),
    })
}

/// Expected gradients: for every background sample and each of `n_path_samples`
/// draws of α ~ U(0,1), accumulates `(x − b) ⊙ ∇f(b + α(x − b))`, then averages.
pub fn gradient_shap<M: GradModel + ?Sized>(
    f: &M,
    x: &Tensor,
    bg: &BackgroundSet,
    n_path_samples: usize,
    seed: u64,
) -> Result<AttributionMap> {
    let mut maps = gradient_shap_batch(f, &x.unsqueeze(), bg, n_path_samples, seed)?;
    Ok(maps.remove(0))
}

/// [`gradient_shap`] for every sample of `xs`, each with the same seed.
pub fn gradient_shap_batch<M: GradModel + ?Sized>(
    f: &M,
    xs: &Tensor,
    bg: &BackgroundSet,
    n_path_samples: usize,
    seed: u64,
) -> Result<Vec<AttributionMap>> {
    if n_path_samples == 0 {
        return Err(Error::invalid("gradient_shap needs at least one path sample"));
    }
    if xs.rank() < 2 || xs.shape()[1..] != *bg.sample_shape() {
        return Err(Error::shape("attribution input", format!("[batch, ..{:?}]", bg.sample_shape()), xs.shape()));
    }
    let m = xs.sample_len();
    let nb = bg.size();
    let base_value = f.eval(&bg.samples)?.iter().sum::<f64>() / nb as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphas: Vec<f64> = (0..n_path_samples * nb).map(|_| rng.random::<f64>()).collect();
    let paths = alphas.len();
    // Group samples so each gradient call sees a reasonably large batch.
    let per_call = (EVAL_CHUNK / 16 / paths).max(1);
    let mut maps = Vec::with_capacity(xs.batch_len());
    let idx: Vec<usize> = (0..xs.batch_len()).collect();
    for group in idx.chunks(per_call) {
        let mut rows = Vec::with_capacity(group.len() * paths * m);
        for &s in group {
            let x = xs.sample(s);
            for (p, &a) in alphas.iter().enumerate() {
                let b = bg.samples.sample(p % nb);
                rows.extend(x.iter().zip(b).map(|(xi, bi)| bi + a * (xi - bi)));
            }
        }
        let mut shape = vec![group.len() * paths];
        shape.extend_from_slice(bg.sample_shape());
        let (_, grads) = f.eval_grad(&Tensor::new(shape, rows)?)?;
        for (g, &s) in group.iter().enumerate() {
            let x = xs.sample(s);
            let mut phi = vec![0.0; m];
            for p in 0..paths {
                let b = bg.samples.sample(p % nb);
                let gr = grads.sample(g * paths + p);
                for i in 0..m {
                    phi[i] += (x[i] - b[i]) * gr[i];
                }
            }
            phi.iter_mut().for_each(|v| *v /= paths as f64);
            maps.push(AttributionMap {
                values: Tensor::new(bg.sample_shape().to_vec(), phi)?,
                base_value,
                estimator: Estimator::Gradient,
                background_id: Some(bg.id.clone()),
            });
        }
    }
    Ok(maps)
}

/// `φ_i = f(x) − f(x with feature i set to baseline_value)`, from M+1 evaluations.
pub fn loo_attribution<M: ScalarModel + ?Sized>(f: &M, x: &Tensor, baseline_value: f64) -> Result<AttributionMap> {
    let m = x.len();
    let mut rows = Vec::with_capacity((m + 1) * m);
    rows.extend_from_slice(x.data());
    for i in 0..m {
        let start = rows.len();
        rows.extend_from_slice(x.data());
        rows[start + i] = baseline_value;
    }
    let outs = eval_chunked(f, &rows, x.shape())?;
    let phi = outs[1..].iter().map(|v| outs[0] - v).collect();
    Ok(AttributionMap {
        values: Tensor::new(x.shape().to_vec(), phi)?,
        base_value: outs[0],
        estimator: Estimator::Loo,
        background_id: None,
    })
}

/// Content-addressed on-disk store of attribution maps.
#[derive(Debug, Clone)]
pub struct AttributionCache {
    dir: PathBuf,
}

impl AttributionCache {
    pub fn open(dir: &Path) -> Result<AttributionCache> {
        fs::create_dir_all(dir)?;
        Ok(AttributionCache { dir: dir.to_path_buf() })
    }

    /// Key over model, sample, estimator (including its parameters and background), and seed.
    pub fn key(model_hash: &str, sample: &Tensor, estimator: &str, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(model_hash.as_bytes());
        h.update([0]);
        h.update(sample.content_bytes());
        h.update([0]);
        h.update(estimator.as_bytes());
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<AttributionMap> {
        let text = fs::read(self.path(key)).ok()?;
        serde_json::from_slice(&text).ok()
    }

    pub fn put(&self, key: &str, map: &AttributionMap) -> Result<()> {
        let tmp = self.dir.join(format!("{key}.tmp"));
        fs::write(&tmp, serde_json::to_vec(map)?)?;
        fs::rename(tmp, self.path(key))?;
        Ok(())
    }
}

/// [`gradient_shap_batch`] against a victim, reusing and filling `cache` when given.
pub fn gradient_shap_cached(
    victim: &VictimModel,
    xs: &Tensor,
    bg: &BackgroundSet,
    n_path_samples: usize,
    seed: u64,
    cache: Option<&AttributionCache>,
) -> Result<Vec<AttributionMap>> {
    let Some(cache) = cache else {
        return gradient_shap_batch(victim, xs, bg, n_path_samples, seed);
    };
    let model = victim.fingerprint();
    let tag = format!("gradient/{}/{}", bg.id(), n_path_samples);
    let samples = xs.unstack();
    let keys: Vec<String> = samples.iter().map(|s| AttributionCache::key(&model, s, &tag, seed)).collect();
    let mut found: Vec<Option<AttributionMap>> = keys.iter().map(|k| cache.get(k)).collect();
    let missing: Vec<usize> = (0..found.len()).filter(|&i| found[i].is_none()).collect();
    if !missing.is_empty() {
        let fresh = gradient_shap_batch(victim, &xs.select(&missing), bg, n_path_samples, seed)?;
        for (&i, map) in missing.iter().zip(fresh) {
            cache.put(&keys[i], &map)?;
            found[i] = Some(map);
        }
    }
    Ok(found.into_iter().flatten().collect())
}

/// Stacks map values into a `[batch, ..sample_shape]` tensor.
pub fn stack_values(maps: &[AttributionMap]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = maps.iter().map(|m| &m.values).collect();
    Tensor::stack(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg_from(rows: &[&[f64]]) -> BackgroundSet {
        BackgroundSet::new(Tensor::from_rows(rows, &[rows[0].len()]).unwrap()).unwrap()
    }

    fn random_bg(m: usize, n: usize, seed: u64) -> BackgroundSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        BackgroundSet::new(Tensor::new(vec![n, m], data).unwrap()).unwrap()
    }

    #[test]
    fn exact_dummy_feature_is_zero() {
        let f = FnModel(|x: &[f64]| x[0] * x[1] + x[2].sin());
        let bg = random_bg(4, 8, 1);
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.2, 5.0]);
        let map = exact_shap(&f, &x, &bg).unwrap();
        assert!(map.values.data()[3].abs() < 1e-12);
    }

    #[test]
    fn exact_efficiency() {
        let f = FnModel(|x: &[f64]| (x[0] * x[1]).tanh() + x[2] * x[3] * x[4]);
        let bg = random_bg(5, 6, 2);
        let x = Tensor::from_vec(vec![0.5, 1.0, -0.2, 0.9, 0.4]);
        let map = exact_shap(&f, &x, &bg).unwrap();
        let fx = f.eval(&x.unsqueeze()).unwrap()[0];
        assert!((map.total() - (fx - map.base_value)).abs() < 1e-9);
    }

    #[test]
    fn exact_linear_closed_form() {
        let w = [1.5, -2.0, 0.25];
        let f = FnModel(move |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum());
        let bg = bg_from(&[&[0.0, 1.0, 2.0], &[1.0, -1.0, 0.0]]);
        let x = Tensor::from_vec(vec![2.0, 3.0, -1.0]);
        let map = exact_shap(&f, &x, &bg).unwrap();
        let mu = [0.5, 0.0, 1.0];
        for i in 0..3 {
            assert!((map.values.data()[i] - w[i] * (x.data()[i] - mu[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_rejects_large_m() {
        let f = FnModel(|x: &[f64]| x[0]);
        let bg = random_bg(16, 2, 3);
        let err = exact_shap(&f, &Tensor::zeros(&[16]), &bg).unwrap_err();
        assert!(err.to_string().contains("sampling_shap"));
    }

    #[test]
    fn sampling_is_seeded_and_symmetric() {
        let f = FnModel(|x: &[f64]| x[0] + x[1]);
        let bg = bg_from(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let x = Tensor::from_vec(vec![2.0, 2.0]);
        let a = sampling_shap(&f, &x, &bg, 20, 9).unwrap();
        let b = sampling_shap(&f, &x, &bg, 20, 9).unwrap();
        assert_eq!(a, b);
        assert!((a.values.data()[0] - a.values.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn gradient_zero_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Module::sequential(vec![Module::dense(3, 4, &mut rng), Module::Sigmoid, Module::dense(4, 1, &mut rng)]);
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let bg = BackgroundSet::new(x.unsqueeze()).unwrap();
        let map = gradient_shap(&net, &x, &bg, 5, 0).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_exact_for_any_path_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Module::sequential(vec![Module::dense(3, 1, &mut rng)]);
        let w = net.parameters()[0].data().to_vec();
        let bg = bg_from(&[&[0.0, 1.0, 2.0], &[1.0, -1.0, 0.0], &[0.5, 0.5, 0.5]]);
        let x = Tensor::from_vec(vec![2.0, 3.0, -1.0]);
        let mu = [0.5, 0.5 / 3.0, 2.5 / 3.0];
        for n in [1, 3, 7] {
            let map = gradient_shap(&net, &x, &bg, n, 11).unwrap();
            for i in 0..3 {
                assert!((map.values.data()[i] - w[i] * (x.data()[i] - mu[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loo_basics() {
        let c = FnModel(|_: &[f64]| 3.0);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(loo_attribution(&c, &x, 0.0).unwrap().values.data().iter().all(|&v| v == 0.0));
        let first = FnModel(|x: &[f64]| x[0]);
        let map = loo_attribution(&first, &x, 0.0).unwrap();
        assert_eq!(map.values.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn loo_uses_m_plus_one_evaluations() {
        let f = FnModel(|x: &[f64]| x.iter().sum());
        for m in [1, 5, 40] {
            let counter = CountingModel::new(&f);
            loo_attribution(&counter, &Tensor::zeros(&[m]), 0.0).unwrap();
            assert_eq!(counter.calls(), m + 1);
        }
    }

    #[test]
    fn background_from_training_is_subset() {
        let train = Tensor::new(vec![10, 2], (0..20).map(f64::from).collect()).unwrap();
        let bg = BackgroundSet::from_training(&train, 4, 1).unwrap();
        assert_eq!(bg.size(), 4);
        for i in 0..4 {
            let row = bg.samples().sample(i);
            assert!((0..10).any(|j| train.sample(j) == row));
        }
        assert!(BackgroundSet::new(Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AttributionCache::open(dir.path()).unwrap();
        let x = Tensor::from_vec(vec![0.1, 1.0 / 3.0]);
        let map = AttributionMap {
            values: x.clone(),
            base_value: std::f64::consts::PI,
            estimator: Estimator::Gradient,
            background_id: Some("bg".into()),
        };
        let key = AttributionCache::key("model", &x, "gradient", 7);
        assert_ne!(key, AttributionCache::key("model", &x, "gradient", 8));
        assert!(cache.get(&key).is_none());
        cache.put(&key, &map).unwrap();
        assert_eq!(cache.get(&key).unwrap(), map);
    }
}
