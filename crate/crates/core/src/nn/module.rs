use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// Forward-pass mode. Dropout draws its masks from the RNG only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// A network layer or a sequential composition of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Module {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    MaxPool2d { kernel: usize, stride: usize },
    Relu,
    Sigmoid,
    Dropout { p: f64 },
    Flatten,
    Sequential { layers: Vec<Module> },
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Module {
    /// Fully connected layer with He-uniform weights and zero bias.
    pub fn dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Module {
        let bound = (6.0 / inputs as f64).sqrt();
        Module::Dense {
            weight: Tensor::new(vec![outputs, inputs], uniform(rng, outputs * inputs, bound))
                .expect("dense weight")
                .with_grad(),
            bias: Tensor::zeros(&[outputs]).with_grad(),
        }
    }

    /// Unpadded stride-1 convolution with He-uniform weights.
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Module {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Module::Conv2d {
            weight: Tensor::new(
                vec![out_channels, in_channels, kernel, kernel],
                uniform(rng, out_channels * fan_in, bound),
            )
            .expect("conv weight")
            .with_grad(),
            bias: Tensor::zeros(&[out_channels]).with_grad(),
            stride: 1,
            padding: 0,
        }
    }

    pub fn maxpool2d(kernel: usize, stride: usize) -> Module {
        Module::MaxPool2d { kernel, stride }
    }

    pub fn dropout(p: f64) -> Result<Module> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        Ok(Module::Dropout { p })
    }

    pub fn sequential(layers: Vec<Module>) -> Module {
        Module::Sequential { layers }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Module::Dense { .. } => "dense",
            Module::Conv2d { .. } => "conv2d",
            Module::MaxPool2d { .. } => "maxpool2d",
            Module::Relu => "relu",
            Module::Sigmoid => "sigmoid",
            Module::Dropout { .. } => "dropout",
            Module::Flatten => "flatten",
            Module::Sequential { .. } => "sequential",
        }
    }

    /// Sub-layers of a sequential module; a single layer otherwise.
    pub fn layers(&self) -> &[Module] {
        match self {
            Module::Sequential { layers } => layers,
            other => std::slice::from_ref(other),
        }
    }

    /// Runs the module on `input` and returns the output value.
    pub fn forward(&self, input: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut tape = Tape::frozen();
        let x = tape.input(Tensor::new(input.shape().to_vec(), input.data().to_vec())?);
        let y = self.forward_var(&mut tape, x, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_var(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match self {
            Module::Dense { weight, bias } => {
                let w = tape.param(weight);
                let b = tape.param(bias);
                tape.dense(x, w, b)
            }
            Module::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = tape.param(weight);
                let b = tape.param(bias);
                tape.conv2d(x, w, b, *stride, *padding)
            }
            Module::MaxPool2d { kernel, stride } => tape.maxpool2d(x, *kernel, *stride),
            Module::Relu => tape.relu(x),
            Module::Sigmoid => tape.sigmoid(x),
            Module::Dropout { p } => match mode {
                Mode::Train(rng) if *p > 0.0 => {
                    let keep = 1.0 - p;
                    let mask = (0..tape.value(x).len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    tape.dropout_mask(x, mask)
                }
                _ => Ok(x),
            },
            Module::Flatten => tape.flatten(x),
            Module::Sequential { layers } => layers.iter().try_fold(x, |h, layer| layer.forward_var(tape, h, mode)),
        }
    }

    /// Parameters in the order they are registered on a tape.
    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Module::Dense { weight, bias } | Module::Conv2d { weight, bias, .. } => vec![weight, bias],
            Module::Sequential { layers } => layers.iter().flat_map(Module::parameters).collect(),
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Module::Dense { weight, bias } | Module::Conv2d { weight, bias, .. } => vec![weight, bias],
            Module::Sequential { layers } => layers.iter_mut().flat_map(Module::parameters_mut).collect(),
            _ => Vec::new(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Adds the tape's parameter gradients into this module's tensors.
    ///
    /// The tape must hold exactly one forward pass of this module.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        accumulate_grads(tape, self.parameters_mut())
    }

    /// Checks parameter shapes against the layer hyper-settings.
    pub fn validate(&self) -> Result<()> {
        match self {
            Module::Dense { weight, bias } => {
                let s = weight.shape();
                if s.len() != 2 || bias.shape() != [s[0]] {
                    return Err(Error::shape("dense", "weight [out, in] and bias [out]", s));
                }
            }
            Module::Conv2d {
                weight, bias, stride, ..
            } => {
                let s = weight.shape();
                if s.len() != 4 || s[2] != s[3] || bias.shape() != [s[0]] || *stride == 0 {
                    return Err(Error::shape("conv2d", "weight [out, in, k, k] and bias [out]", s));
                }
            }
            Module::MaxPool2d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::invalid("maxpool2d kernel and stride must be positive"));
                }
            }
            Module::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
                }
            }
            Module::Sequential { layers } => layers.iter().try_for_each(Module::validate)?,
            Module::Relu | Module::Sigmoid | Module::Flatten => {}
        }
        if self.parameters().iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite(format!("{} parameters", self.name())));
        }
        Ok(())
    }
}

/// Adds `tape`'s parameter gradients to `params`, matched by registration order.
pub fn accumulate_grads(tape: &Tape, params: Vec<&mut Tensor>) -> Result<()> {
    let grads = tape.param_grads();
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "tape registered {} parameters but {} were supplied",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if g.len() != p.len() {
            return Err(Error::shape("accumulate_grads", format!("{} values", g.len()), p.shape()));
        }
        if p.requires_grad {
            p.accumulate_grad(&g);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = Module::Relu
            .forward(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]), &mut Mode::Eval)
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_dense_is_identity() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let layer = Module::Dense {
            weight: Tensor::new(vec![3, 3], eye).unwrap(),
            bias: Tensor::zeros(&[3]),
        };
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(layer.forward(&x, &mut Mode::Eval).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_on_ones_image_gives_nines() {
        let layer = Module::Conv2d {
            weight: Tensor::full(&[1, 1, 3, 3], 1.0),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: 0,
        };
        let y = layer.forward(&Tensor::full(&[1, 1, 5, 5], 1.0), &mut Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let layer = Module::dropout(0.4).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(layer.forward(&x, &mut Mode::Eval).unwrap(), x);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let layer = Module::dropout(0.5).unwrap();
        let x = Tensor::full(&[1000], 1.0);
        let mut r = rng();
        let y = layer.forward(&x, &mut Mode::Train(&mut r)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn dropout_probability_must_be_below_one() {
        assert!(Module::dropout(1.0).is_err());
        assert!(Module::dropout(-0.1).is_err());
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let mut r = rng();
        let layer = Module::dense(4, 2, &mut r);
        let err = layer
            .forward(&Tensor::zeros(&[1, 3]), &mut Mode::Eval)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dense") && err.contains("[1, 3]"), "{err}");
    }

    #[test]
    fn sequential_matches_manual_composition() {
        let mut r = rng();
        let a = Module::dense(3, 4, &mut r);
        let b = Module::dense(4, 2, &mut r);
        let seq = Module::sequential(vec![a.clone(), Module::Relu, b.clone()]);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 0.5, -1.5]).unwrap();
        let manual = b
            .forward(
                &Module::Relu.forward(&a.forward(&x, &mut Mode::Eval).unwrap(), &mut Mode::Eval).unwrap(),
                &mut Mode::Eval,
            )
            .unwrap();
        assert_eq!(seq.forward(&x, &mut Mode::Eval).unwrap(), manual);
    }
}
