//! Finite-difference gradient checks shared by the gradcheck suite and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapshield_core::nn::{Mode, Module, Tape, Tensor};

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Scalar objective: weighted sum of module outputs with fixed random weights.
fn objective(module: &Module, x: &Tensor, weights: &[f64], mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let y = module.forward(x, &mut Mode::Train(&mut rng)).unwrap();
    y.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn autodiff(module: &Module, x: &Tensor, weights: &[f64], mask_seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let y = module.forward_var(&mut tape, xv, &mut Mode::Train(&mut rng)).unwrap();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec()).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    (tape.grad(xv).unwrap().to_vec(), tape.param_grads())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1.0)
}

/// Returns the max relative error over input and parameter gradients.
pub fn check(module: &Module, x: &Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let out_len = module.forward(x, &mut Mode::Eval).unwrap().len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (gx, gp) = autodiff(module, x, &weights, seed);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let fd = (objective(module, &plus, &weights, seed) - objective(module, &minus, &weights, seed)) / (2.0 * H);
        worst = worst.max(rel_err(fd, gx[i]));
    }
    let n_params = module.parameters().len();
    for p in 0..n_params {
        let len = module.parameters()[p].len();
        for j in 0..len {
            let mut plus = module.clone();
            plus.parameters_mut()[p].data_mut()[j] += H;
            let mut minus = module.clone();
            minus.parameters_mut()[p].data_mut()[j] -= H;
            let fd = (objective(&plus, x, &weights, seed) - objective(&minus, x, &weights, seed)) / (2.0 * H);
            worst = worst.max(rel_err(fd, gp[p][j]));
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Rejects inputs near a ReLU kink.
fn away_from_kinks(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.abs() > 10.0 * H)
}

/// Rejects inputs where a 2×2 pooling window has a near-tie.
fn pool_windows_separated(t: &Tensor) -> bool {
    let s = t.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    for p in 0..planes {
        for i in (0..h - 1).step_by(2) {
            for j in (0..w - 1).step_by(2) {
                let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| t.data()[p * h * w + (i + a) * w + j + b])
                    .collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if v[0] - v[1] < 10.0 * H {
                    return false;
                }
            }
        }
    }
    true
}

pub fn case(kind: usize, seed: u64) -> Option<(Module, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (module, x) = match kind {
        0 => (Module::dense(4, 3, &mut rng), random_tensor(&[2, 4], &mut rng)),
        1 => {
            let mut conv = Module::conv2d(2, 3, 3, &mut rng);
            if let Module::Conv2d { bias, .. } = &mut conv {
                bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            (conv, random_tensor(&[2, 2, 5, 5], &mut rng))
        }
        2 => {
            let x = random_tensor(&[1, 2, 4, 4], &mut rng);
            if !pool_windows_separated(&x) {
                return None;
            }
            (Module::maxpool2d(2, 2), x)
        }
        3 => {
            let x = random_tensor(&[3, 5], &mut rng);
            if !away_from_kinks(&x) {
                return None;
            }
            (Module::Relu, x)
        }
        4 => (Module::Sigmoid, random_tensor(&[3, 5], &mut rng).map(|v| 3.0 * v)),
        5 => (Module::dropout(0.4).unwrap(), random_tensor(&[4, 6], &mut rng)),
        6 => (Module::Flatten, random_tensor(&[2, 2, 3, 3], &mut rng)),
        _ => {
            // 2-layer MLP inside a sequential container.
            let mlp = Module::sequential(vec![
                Module::dense(5, 6, &mut rng),
                Module::Sigmoid,
                Module::dense(6, 1, &mut rng),
            ]);
            (mlp, random_tensor(&[3, 5], &mut rng))
        }
    };
    Some((module, x))
}

/// Checks `n` seeded cases cycling through every layer kind; returns the worst relative error
/// together with the case that produced it.
pub fn worst_over_cases(n: usize) -> (f64, String) {
    let mut checked = 0;
    let mut worst = (0.0, String::new());
    let mut seed = 0u64;
    while checked < n {
        let kind = checked % 8;
        seed += 1;
        if let Some((m, x)) = case(kind, seed) {
            let e = check(&m, &x, seed);
            if e >= worst.0 {
                worst = (e, format!("{} seed {seed}", m.name()));
            }
            checked += 1;
        }
    }
    worst
}
