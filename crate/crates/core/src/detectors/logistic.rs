//! L2-regularized logistic regression fitted by Newton's method, for low-dimensional features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

const RIDGE: f64 = 1e-4;
const MAX_NEWTON_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Solves `a·x = b` for a small dense symmetric positive-definite system.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::invalid("singular system in logistic regression"));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

/// Fits `P(y=1|x)` on rows `xs` with binary `ys`.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[u8]) -> Result<LogisticModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid("logistic regression needs one label per nonempty row"));
    }
    if !ys.contains(&0) || !ys.contains(&1) {
        return Err(Error::invalid("logistic regression needs both classes"));
    }
    let d = xs[0].len();
    let p = d + 1;
    let mut theta = vec![0.0; p];
    let n = xs.len() as f64;
    for _ in 0..MAX_NEWTON_STEPS {
        let mut g = vec![0.0; p];
        let mut h = vec![0.0; p * p];
        for (x, &y) in xs.iter().zip(ys) {
            let z = theta[d] + x.iter().zip(&theta).map(|(v, w)| v * w).sum::<f64>();
            let pr = sigmoid(z);
            let r = pr - f64::from(y);
            let s = pr * (1.0 - pr);
            let ext: Vec<f64> = x.iter().copied().chain([1.0]).collect();
            for i in 0..p {
                g[i] += r * ext[i] / n;
                for j in 0..p {
                    h[i * p + j] += s * ext[i] * ext[j] / n;
                }
            }
        }
        for i in 0..d {
            g[i] += RIDGE * theta[i];
            h[i * p + i] += RIDGE;
        }
        h[d * p + d] += 1e-12;
        let step = solve(h, g)?;
        let size = step.iter().map(|v| v.abs()).fold(0.0, f64::max);
        theta.iter_mut().zip(&step).for_each(|(t, s)| *t -= s);
        if size < 1e-10 {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression weights".into()));
    }
    Ok(LogisticModel {
        bias: theta[d],
        weights: theta[..d].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_shifted_classes() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i % 20) * 0.1 + if i < 20 { 0.0 } else { 2.5 }]).collect();
        let ys: Vec<u8> = (0..40).map(|i| u8::from(i >= 20)).collect();
        let m = fit_logistic(&xs, &ys).unwrap();
        let acc = xs.iter().zip(&ys).filter(|(x, &y)| u8::from(m.probability(x) >= 0.5) == y).count();
        assert_eq!(acc, 40);
    }

    #[test]
    fn balanced_uninformative_feature_gives_half() {
        let xs = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        let ys = vec![0, 1, 0, 1];
        let m = fit_logistic(&xs, &ys).unwrap();
        assert!((m.probability(&[1.5]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn needs_both_classes() {
        assert!(fit_logistic(&[vec![1.0]], &[1]).is_err());
    }
}
