//! Adversarial generators: L∞ PGD, L2 Carlini–Wagner, and a greedy saliency-guided
//! sparse attack for tabular inputs.
//!
//! All three run batched: samples never interact in an eval-mode forward pass, so the
//! gradient of a weighted logit sum yields every per-sample input gradient at once.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::FlatAdam;
use crate::nn::{checkpoint, Tensor};
use crate::victims::{Prediction, VictimModel};

const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Pgd,
    Cw,
    SaliencySparse,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Pgd => "pgd",
            AttackMethod::Cw => "cw",
            AttackMethod::SaliencySparse => "saliency_sparse",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s {
            "pgd" => Ok(AttackMethod::Pgd),
            "cw" => Ok(AttackMethod::Cw),
            "saliency_sparse" | "sparse" => Ok(AttackMethod::SaliencySparse),
            other => Err(Error::invalid(format!("unknown attack method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ radius (PGD).
    pub epsilon: f64,
    /// Signed-gradient step (PGD).
    pub step_size: f64,
    /// PGD iterations, or Adam steps per binary-search round for C&W.
    pub max_iters: usize,
    /// Start PGD from a uniform point in the ε-ball instead of the original.
    pub random_start: bool,
    pub seed: u64,
    pub c_init: f64,
    pub binary_search_steps: usize,
    pub kappa: f64,
    /// Adam learning rate in tanh space (C&W).
    pub cw_lr: f64,
    pub max_perturbed_features: usize,
    /// Per-feature move of the sparse attack.
    pub sparse_step: f64,
    /// Valid input range `(low, high)`.
    pub clamp: (f64, f64),
}

impl AttackConfig {
    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Pgd,
            epsilon,
            step_size: epsilon / 4.0,
            max_iters: 40,
            random_start: false,
            seed: 0,
            c_init: 1e-2,
            binary_search_steps: 5,
            kappa: 0.0,
            cw_lr: 1e-2,
            max_perturbed_features: 5,
            sparse_step: 1.0,
            clamp: (0.0, 1.0),
        }
    }

    pub fn cw() -> Self {
        AttackConfig {
            method: AttackMethod::Cw,
            max_iters: 200,
            ..Self::pgd(0.1)
        }
    }

    pub fn saliency_sparse(budget: usize) -> Self {
        AttackConfig {
            method: AttackMethod::SaliencySparse,
            max_iters: budget,
            max_perturbed_features: budget,
            sparse_step: 1.0,
            clamp: (-5.0, 5.0),
            ..Self::pgd(0.1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.kappa < 0.0 {
            return bad("kappa must be non-negative");
        }
        if !(self.clamp.0 < self.clamp.1) {
            return bad("clamp range must satisfy low < high");
        }
        match self.method {
            AttackMethod::Pgd if self.epsilon < 0.0 || self.step_size <= 0.0 => {
                bad("pgd needs epsilon >= 0 and a positive step size")
            }
            AttackMethod::Cw if self.binary_search_steps == 0 || self.c_init <= 0.0 || self.cw_lr <= 0.0 => {
                bad("cw needs binary_search_steps >= 1, c_init > 0 and cw_lr > 0")
            }
            AttackMethod::SaliencySparse if self.max_perturbed_features == 0 || self.sparse_step <= 0.0 => {
                bad("saliency_sparse needs a positive budget and step")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub original: Tensor,
    pub adversarial: Tensor,
    pub success: bool,
    pub l2_norm: f64,
    pub linf_norm: f64,
    pub iterations_used: usize,
}

impl AttackResult {
    fn new(original: &[f64], adversarial: Vec<f64>, shape: &[usize], success: bool, iterations_used: usize) -> Self {
        let (l2, linf) = norms(original, &adversarial);
        AttackResult {
            original: Tensor::new(shape.to_vec(), original.to_vec()).expect("sample shape"),
            adversarial: Tensor::new(shape.to_vec(), adversarial).expect("sample shape"),
            success,
            l2_norm: l2,
            linf_norm: linf,
            iterations_used,
        }
    }

    /// Number of features the attack changed.
    pub fn changed_features(&self) -> usize {
        self.original
            .data()
            .iter()
            .zip(self.adversarial.data())
            .filter(|(a, b)| a != b)
            .count()
    }
}

fn norms(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut inf: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = y - x;
        sq += d * d;
        inf = inf.max(d.abs());
    }
    (sq.sqrt(), inf)
}

/// +1 when the original label is 1: the "true-class minus other-class" logit margin is `sign · z`.
fn margin_sign(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

fn label_of(z: f64) -> u8 {
    Prediction::from_logit(z).label
}

/// Attacks one sample.
pub fn attack(m: &VictimModel, x: &Tensor, y: u8, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut out = attack_batch(m, &x.unsqueeze(), &[y], cfg)?;
    Ok(out.remove(0))
}

pub fn pgd_attack(m: &VictimModel, x: &Tensor, y: u8, cfg: &AttackConfig) -> Result<AttackResult> {
    attack(m, x, y, &AttackConfig { method: AttackMethod::Pgd, ..cfg.clone() })
}

pub fn cw_attack(m: &VictimModel, x: &Tensor, y: u8, cfg: &AttackConfig) -> Result<AttackResult> {
    attack(m, x, y, &AttackConfig { method: AttackMethod::Cw, ..cfg.clone() })
}

pub fn saliency_sparse_attack(m: &VictimModel, x: &Tensor, y: u8, cfg: &AttackConfig) -> Result<AttackResult> {
    attack(
        m,
        x,
        y,
        &AttackConfig {
            method: AttackMethod::SaliencySparse,
            ..cfg.clone()
        },
    )
}

/// Attacks every sample of `xs` (`[n, ..sample_shape]`) against its label in `ys`.
pub fn attack_batch(m: &VictimModel, xs: &Tensor, ys: &[u8], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let shape = m.sample_shape();
    if xs.rank() != shape.len() + 1 || xs.shape()[1..] != shape[..] || xs.batch_len() != ys.len() {
        return Err(Error::shape("attack input", format!("[{}, ..{shape:?}]", ys.len()), xs.shape()));
    }
    if cfg.method == AttackMethod::SaliencySparse && m.task.is_image() {
        return Err(Error::invalid("saliency_sparse is a tabular attack; image victims are not supported"));
    }
    let mut results = Vec::with_capacity(ys.len());
    let idx: Vec<usize> = (0..ys.len()).collect();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let x0 = xs.select(chunk);
        let y: Vec<u8> = chunk.iter().map(|&i| ys[i]).collect();
        let part = match cfg.method {
            AttackMethod::Pgd => pgd_chunk(m, &x0, &y, cfg, c as u64)?,
            AttackMethod::Cw => cw_chunk(m, &x0, &y, cfg)?,
            AttackMethod::SaliencySparse => sparse_chunk(m, &x0, &y, cfg)?,
        };
        results.extend(part);
    }
    Ok(results)
}

/// Runs `victim.logit_input_grad` on the `active` rows of `x`.
fn grads_for(m: &VictimModel, x: &[Vec<f64>], active: &[usize], weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let rows: Vec<&[f64]> = active.iter().map(|&i| x[i].as_slice()).collect();
    let batch = Tensor::from_rows(&rows, &m.sample_shape())?;
    m.logit_input_grad(&batch, weights)
}

fn pgd_chunk(m: &VictimModel, x0: &Tensor, y: &[u8], cfg: &AttackConfig, chunk: u64) -> Result<Vec<AttackResult>> {
    let n = y.len();
    let (lo, hi) = cfg.clamp;
    let eps = cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ chunk.wrapping_mul(0x9e37_79b9));
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            x0.sample(i)
                .iter()
                .map(|&v| {
                    let start = if cfg.random_start && eps > 0.0 { v + rng.random_range(-eps..=eps) } else { v };
                    start.clamp(lo, hi)
                })
                .collect()
        })
        .collect();
    let mut success = vec![false; n];
    let mut iters = vec![0usize; n];
    let z0 = m.logits(x0)?;
    let mut active: Vec<usize> = (0..n).filter(|&i| label_of(z0[i]) == y[i]).collect();
    for i in 0..n {
        if label_of(z0[i]) != y[i] {
            success[i] = true;
        }
    }
    for _ in 0..cfg.max_iters {
        if active.is_empty() {
            break;
        }
        // Sign of d BCE / d z is −1 for label 1 and +1 for label 0.
        let w: Vec<f64> = active.iter().map(|&i| -margin_sign(y[i])).collect();
        let (_, g) = grads_for(m, &x, &active, &w)?;
        for (r, &i) in active.iter().enumerate() {
            let orig = x0.sample(i);
            for ((v, gi), o) in x[i].iter_mut().zip(g.sample(r)).zip(orig) {
                let stepped = *v + cfg.step_size * signum(*gi);
                *v = stepped.clamp(o - eps, o + eps).clamp(lo, hi);
            }
            iters[i] += 1;
        }
        let z = logits_for(m, &x, &active)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            if label_of(z[r]) != y[i] {
                success[i] = true;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    let shape = m.sample_shape();
    Ok((0..n)
        .map(|i| AttackResult::new(x0.sample(i), std::mem::take(&mut x[i]), &shape, success[i], iters[i]))
        .collect())
}

fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logits_for(m: &VictimModel, x: &[Vec<f64>], active: &[usize]) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = active.iter().map(|&i| x[i].as_slice()).collect();
    m.logits(&Tensor::from_rows(&rows, &m.sample_shape())?)
}

fn cw_chunk(m: &VictimModel, x0: &Tensor, y: &[u8], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    let n = y.len();
    let d = x0.sample_len();
    let (lo, hi) = cfg.clamp;
    let half = (hi - lo) / 2.0;
    let to_tanh = |v: f64| (((v - lo) / half - 1.0) * (1.0 - 1e-6)).atanh();
    let w0: Vec<Vec<f64>> = (0..n).map(|i| x0.sample(i).iter().map(|&v| to_tanh(v)).collect()).collect();
    let z0 = m.logits(x0)?;

    let mut c = vec![cfg.c_init; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![1e10; n];
    let mut best: Vec<Option<(f64, Vec<f64>)>> = vec![None; n];
    let mut iters = vec![0usize; n];
    let pending: Vec<usize> = (0..n).filter(|&i| label_of(z0[i]) == y[i]).collect();
    for i in 0..n {
        if label_of(z0[i]) != y[i] {
            // Already on the target side: the zero perturbation is optimal.
            best[i] = Some((0.0, x0.sample(i).to_vec()));
        }
    }
    let abort_every = (cfg.max_iters / 10).max(1);

    for _round in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let mut opt: Vec<FlatAdam> = (0..n).map(|_| FlatAdam::new(d, cfg.cw_lr)).collect();
        let mut found = vec![false; n];
        let mut prev_loss = vec![f64::INFINITY; n];
        let mut active = pending.clone();
        for step in 0..=cfg.max_iters {
            if active.is_empty() {
                break;
            }
            let adv: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    if active.contains(&i) {
                        w[i].iter().map(|&t| lo + half * (t.tanh() + 1.0)).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            let weights: Vec<f64> = active.iter().map(|&i| c[i] * margin_sign(y[i])).collect();
            let (z, g) = grads_for(m, &adv, &active, &weights)?;
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let orig = x0.sample(i);
                let (l2, _) = norms(orig, &adv[i]);
                let margin = margin_sign(y[i]) * z[r];
                if label_of(z[r]) != y[i] && best[i].as_ref().is_none_or(|(b, _)| l2 < *b) {
                    best[i] = Some((l2, adv[i].clone()));
                }
                if label_of(z[r]) != y[i] {
                    found[i] = true;
                }
                if step == cfg.max_iters {
                    continue;
                }
                let loss = l2 * l2 + c[i] * margin.max(-cfg.kappa);
                if step % abort_every == 0 {
                    if loss > prev_loss[i] * 0.9999 {
                        continue;
                    }
                    prev_loss[i] = loss;
                }
                let hinge_active = margin > -cfg.kappa;
                let grad_w: Vec<f64> = w[i]
                    .iter()
                    .zip(&adv[i])
                    .zip(orig)
                    .zip(g.sample(r))
                    .map(|(((t, a), o), gz)| {
                        let dadv = 2.0 * (a - o) + if hinge_active { *gz } else { 0.0 };
                        let th = t.tanh();
                        dadv * half * (1.0 - th * th)
                    })
                    .collect();
                opt[i].step(&mut w[i], &grad_w);
                iters[i] += 1;
                still.push(i);
            }
            active = still;
        }
        for &i in &pending {
            if found[i] {
                upper[i] = f64::min(upper[i], c[i]);
                if upper[i] < 1e9 {
                    c[i] = (lower[i] + upper[i]) / 2.0;
                }
            } else {
                lower[i] = f64::max(lower[i], c[i]);
                c[i] = if upper[i] < 1e9 { (lower[i] + upper[i]) / 2.0 } else { c[i] * 10.0 };
            }
        }
    }
    let shape = m.sample_shape();
    Ok((0..n)
        .map(|i| match best[i].take() {
            Some((_, adv)) => AttackResult::new(x0.sample(i), adv, &shape, true, iters[i]),
            None => AttackResult::new(x0.sample(i), x0.sample(i).to_vec(), &shape, false, iters[i]),
        })
        .collect())
}

fn sparse_chunk(m: &VictimModel, x0: &Tensor, y: &[u8], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    let n = y.len();
    let d = x0.sample_len();
    let (lo, hi) = cfg.clamp;
    let mut x: Vec<Vec<f64>> = (0..n).map(|i| x0.sample(i).to_vec()).collect();
    let mut touched = vec![vec![false; d]; n];
    let mut success = vec![false; n];
    let mut rounds = vec![0usize; n];
    let z0 = m.logits(x0)?;
    let mut active: Vec<usize> = Vec::new();
    for i in 0..n {
        if label_of(z0[i]) != y[i] {
            success[i] = true;
        } else {
            active.push(i);
        }
    }
    let budget = cfg.max_perturbed_features.min(d);
    for _ in 0..budget {
        if active.is_empty() {
            break;
        }
        let w: Vec<f64> = active.iter().map(|&i| -margin_sign(y[i])).collect();
        let (_, g) = grads_for(m, &x, &active, &w)?;
        let mut moved = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let gi = g.sample(r);
            // Most salient untouched feature whose move is not blocked by the clamp.
            let pick = (0..d)
                .filter(|&j| !touched[i][j] && gi[j] != 0.0)
                .filter(|&j| {
                    let target = (x[i][j] + cfg.sparse_step * signum(gi[j])).clamp(lo, hi);
                    target != x[i][j]
                })
                .max_by(|&a, &b| gi[a].abs().total_cmp(&gi[b].abs()).then(b.cmp(&a)));
            let Some(j) = pick else { continue };
            x[i][j] = (x[i][j] + cfg.sparse_step * signum(gi[j])).clamp(lo, hi);
            touched[i][j] = true;
            rounds[i] += 1;
            moved.push(i);
        }
        if moved.is_empty() {
            break;
        }
        let z = logits_for(m, &x, &moved)?;
        let mut still = Vec::with_capacity(moved.len());
        for (r, &i) in moved.iter().enumerate() {
            if label_of(z[r]) != y[i] {
                success[i] = true;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    let shape = m.sample_shape();
    Ok((0..n)
        .map(|i| AttackResult::new(x0.sample(i), std::mem::take(&mut x[i]), &shape, success[i], rounds[i]))
        .collect())
}

/// A persisted batch of attack results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSet {
    pub config: AttackConfig,
    /// Victim labels of the originals.
    pub labels: Vec<u8>,
    pub results: Vec<AttackResult>,
}

impl AttackSet {
    pub fn success_rate(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.success).count() as f64 / self.results.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "attack_set", self)
    }

    pub fn load(path: &Path) -> Result<AttackSet> {
        checkpoint::load(path, "attack_set")
    }
}
