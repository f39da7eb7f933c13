//! Soft-margin RBF support vector machine solved by sequential minimal optimization
//! with second-order working-set selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const KKT_TOLERANCE: f64 = 1e-3;
const TAU: f64 = 1e-12;
const MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// `[n_sv, d]`.
    pub support_vectors: Tensor,
    /// `α_i · y_i` per support vector, so `|dual_coeffs| ≤ C`.
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    /// Maximal KKT violation at the returned solution.
    pub kkt_violation: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl SvmModel {
    /// Signed distance-like score; positive means the `+1` (adversarial) class.
    pub fn decision(&self, x: &[f64]) -> f64 {
        let n = self.dual_coeffs.len();
        (0..n)
            .map(|i| self.dual_coeffs[i] * rbf(self.support_vectors.sample(i), x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn decision_batch(&self, xs: &Tensor) -> Result<Vec<f64>> {
        if xs.sample_len() != self.support_vectors.sample_len() {
            return Err(Error::shape(
                "svm input",
                format!("{} features", self.support_vectors.sample_len()),
                xs.shape(),
            ));
        }
        Ok((0..xs.batch_len()).map(|i| self.decision(xs.sample(i))).collect())
    }
}

/// Trains on `negative` (label −1, genuine) and `positive` (label +1, adversarial) rows.
///
/// `gamma = None` uses `1 / d`.
pub fn train_svm(negative: &Tensor, positive: &Tensor, c: f64, gamma: Option<f64>) -> Result<SvmModel> {
    if negative.batch_len() == 0 || positive.batch_len() == 0 {
        return Err(Error::invalid("svm training needs both classes"));
    }
    let d = negative.sample_len();
    if positive.sample_len() != d {
        return Err(Error::shape("svm input", format!("{d} features"), positive.shape()));
    }
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::invalid("svm C must be positive"));
    }
    let gamma = gamma.unwrap_or(1.0 / d as f64);
    let rows: Vec<&[f64]> = (0..negative.batch_len())
        .map(|i| negative.sample(i))
        .chain((0..positive.batch_len()).map(|i| positive.sample(i)))
        .collect();
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("svm training features".into()));
    }
    let n = rows.len();
    let y: Vec<f64> = (0..n).map(|i| if i < negative.batch_len() { -1.0 } else { 1.0 }).collect();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(rows[i], rows[j], gamma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    let violation = loop {
        // i: maximal violator in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && v >= gmax {
                gmax = v;
                i_sel = Some(t);
            }
        }
        // j: second-order choice in I_low.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                let in_low = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
                if !in_low {
                    continue;
                }
                let v = y[t] * grad[t];
                gmax2 = gmax2.max(v);
                let diff = gmax + v;
                if diff > 0.0 {
                    let quad = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                    let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let gap = gmax + gmax2;
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break gap.max(0.0) };
        if gap < KKT_TOLERANCE {
            break gap;
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::SvmNotConverged { iterations, violation: gap });
        }
        iterations += 1;

        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (k[i * n + i] + k[j * n + j] + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k[i * n + i] + k[j * n + j] - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += q(i, t) * di + q(j, t) * dj;
        }
    };

    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb, mut free_sum, mut free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };

    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    let sv_rows: Vec<&[f64]> = sv.iter().map(|&t| rows[t]).collect();
    Ok(SvmModel {
        support_vectors: Tensor::from_rows(&sv_rows, &[d])?,
        dual_coeffs: sv.iter().map(|&t| alpha[t] * y[t]).collect(),
        bias: -rho,
        gamma,
        c,
        kkt_violation: violation,
    })
}
