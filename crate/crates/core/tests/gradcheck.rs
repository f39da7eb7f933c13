//! Autodiff gradients against central finite differences for every layer kind.

mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapshield_core::nn::Module;
use support::{check, random_tensor, worst_over_cases, TOL};

#[test]
fn every_layer_kind_matches_finite_differences() {
    let (worst, at) = worst_over_cases(100);
    assert!(worst <= TOL, "{at}: relative error {worst:.3e}");
}

#[test]
fn relu_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Module::sequential(vec![
        Module::conv2d(1, 2, 3, &mut rng),
        Module::Relu,
        Module::maxpool2d(2, 2),
        Module::Flatten,
        Module::dense(8, 4, &mut rng),
        Module::Relu,
        Module::dense(4, 1, &mut rng),
    ]);
    let x = random_tensor(&[2, 1, 6, 6], &mut rng);
    let e = check(&net, &x, 11);
    assert!(e <= TOL, "relative error {e:.3e}");
}
