use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_pair, map_provenance, DetectorConfig, DetectorKind, DetectorModel, DetectorNets, MapSet, Origin};
use crate::data::{standardize, NormStats};
use crate::error::{Error, Result};
use crate::nn::train::minibatches;
use crate::nn::{accumulate_grads, AdamState, Mode, Module, Tape, Tensor, Var};

use super::svm::train_svm;

/// Widths of the two hidden layers, interpolated geometrically from `m` down to `code`.
pub fn autoencoder_hidden_widths(m: usize, code: usize) -> (usize, usize) {
    let (mf, cf) = (m as f64, code as f64);
    let h1 = (mf.powf(2.0 / 3.0) * cf.powf(1.0 / 3.0)).round() as usize;
    let h2 = (mf.powf(1.0 / 3.0) * cf.powf(2.0 / 3.0)).round() as usize;
    (h1.max(code), h2.max(code))
}

/// Per-sample summed squared error plus `KL(N(μ, σ²) ‖ N(0, I))`, averaged over the batch.
pub fn vae_loss(tape: &mut Tape, recon: Var, target: &Tensor, mu: Var, logvar: Var) -> Result<Var> {
    let m = target.sample_len() as f64;
    let mse = tape.mse(recon, target)?;
    let rec = tape.scale(mse, m)?;
    let kl = tape.kl_gaussian(mu, logvar)?;
    tape.add(rec, kl)
}

fn flat(values: &Tensor) -> Result<Tensor> {
    values.reshape(&[values.batch_len(), values.sample_len()])
}

/// Trains an autoencoder (or VAE) on genuine maps only; the result has no SVM yet.
pub fn train_shap_autoencoder(genuine: &MapSet, variational: bool, cfg: &DetectorConfig) -> Result<DetectorModel> {
    if genuine.origin != Origin::Genuine {
        return Err(Error::invalid(
            "autoencoder detectors are trained on genuine maps only; adversarial maps were supplied",
        ));
    }
    if genuine.is_empty() {
        return Err(Error::invalid("autoencoder training needs genuine maps"));
    }
    let m = genuine.values.sample_len();
    let code = cfg.code_size;
    if code == 0 {
        return Err(Error::invalid("code size must be positive"));
    }
    let (h1, h2) = cfg.ae_hidden.unwrap_or_else(|| autoencoder_hidden_widths(m, code));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc_out = if variational { 2 * code } else { code };
    let mut encoder = Module::sequential(vec![
        Module::dense(m, h1, &mut rng),
        Module::Relu,
        Module::dense(h1, h2, &mut rng),
        Module::Relu,
        Module::dense(h2, enc_out, &mut rng),
    ]);
    let mut decoder = Module::sequential(vec![
        Module::dense(code, h2, &mut rng),
        Module::Relu,
        Module::dense(h2, h1, &mut rng),
        Module::Relu,
        Module::dense(h1, m, &mut rng),
    ]);
    let norm_stats = NormStats::pooled(&genuine.values)?;
    let x = flat(&standardize(&genuine.values, &norm_stats)?)?;
    let mut adam = AdamState::new(cfg.lr);
    for _ in 0..cfg.epochs {
        for batch in minibatches(x.batch_len(), cfg.batch_size, &mut rng) {
            let xb = x.select(&batch);
            let mut tape = Tape::new();
            let input = tape.leaf(&xb);
            let h = encoder.forward_var(&mut tape, input, &mut Mode::Eval)?;
            let loss = if variational {
                let mu = tape.slice_cols(h, 0, code)?;
                let logvar = tape.slice_cols(h, code, code)?;
                let half = tape.scale(logvar, 0.5)?;
                let std = tape.exp(half)?;
                let eps: Vec<f64> = (0..batch.len() * code).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps = tape.constant(Tensor::new(vec![batch.len(), code], eps)?);
                let noise = tape.mul(std, eps)?;
                let z = tape.add(mu, noise)?;
                let recon = decoder.forward_var(&mut tape, z, &mut Mode::Eval)?;
                vae_loss(&mut tape, recon, &xb, mu, logvar)?
            } else {
                let recon = decoder.forward_var(&mut tape, h, &mut Mode::Eval)?;
                tape.mse(recon, &xb)?
            };
            tape.backward(loss)?;
            let mut params = encoder.parameters_mut();
            params.extend(decoder.parameters_mut());
            accumulate_grads(&tape, params)?;
            let mut params = encoder.parameters_mut();
            params.extend(decoder.parameters_mut());
            adam.step(&mut params)?;
        }
    }
    Ok(DetectorModel {
        kind: if variational { DetectorKind::ShapVaeSvm } else { DetectorKind::ShapAeSvm },
        nets: DetectorNets::Autoencoder {
            encoder,
            decoder,
            code_size: code,
            variational,
            error_stats: None,
        },
        svm: None,
        norm_stats,
        threshold: 0.0,
        provenance: map_provenance(genuine),
    })
}

/// Per-feature squared reconstruction error `[n, M]` of standardized maps; the VAE decodes its mean.
pub fn reconstruction_features(det: &DetectorModel, maps: &MapSet) -> Result<Tensor> {
    let DetectorNets::Autoencoder {
        encoder,
        decoder,
        code_size,
        variational,
        ..
    } = &det.nets
    else {
        return Err(Error::invalid(format!(
            "reconstruction features need an autoencoder detector, not {}",
            det.kind.name()
        )));
    };
    det.check_maps(maps)?;
    let x = flat(&standardize(&maps.values, &det.norm_stats)?)?;
    let mut h = encoder.forward(&x, &mut Mode::Eval)?;
    if *variational {
        let n = h.batch_len();
        let rows: Vec<&[f64]> = (0..n).map(|i| &h.sample(i)[..*code_size]).collect();
        h = Tensor::from_rows(&rows, &[*code_size])?;
    }
    let recon = decoder.forward(&h, &mut Mode::Eval)?;
    let err: Vec<f64> = recon.data().iter().zip(x.data()).map(|(r, v)| (r - v) * (r - v)).collect();
    Tensor::new(x.shape().to_vec(), err)
}

/// Fits the RBF-SVM stage on reconstruction errors, standardized with the genuine errors' statistics.
/// The autoencoder itself is untouched.
pub fn attach_svm(det: &DetectorModel, genuine: &MapSet, adversarial: &MapSet, c: f64) -> Result<DetectorModel> {
    check_pair(genuine, adversarial)?;
    let neg = reconstruction_features(det, genuine)?;
    let stats = NormStats::compute(&neg)?;
    let pos = standardize(&reconstruction_features(det, adversarial)?, &stats)?;
    let svm = train_svm(&standardize(&neg, &stats)?, &pos, c, None)?;
    let mut nets = det.nets.clone();
    if let DetectorNets::Autoencoder { error_stats, .. } = &mut nets {
        *error_stats = Some(stats);
    }
    Ok(DetectorModel {
        nets,
        svm: Some(svm),
        threshold: 0.0,
        ..det.clone()
    })
}
