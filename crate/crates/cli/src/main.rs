//! `shapshield`: run experiments or drive single pipeline stages.
//!
//! Every subcommand reads an experiment TOML for the dataset, seeds and victim settings
//! and writes its outputs into a fresh timestamped directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use shapshield_core::attacks::{attack_batch, AttackSet};
use shapshield_core::attribution::{gradient_shap_cached, AttributionCache, BackgroundSet};
use shapshield_core::data::{self, Dataset, NormStats};
use shapshield_core::detectors::{
    attach_svm, detect, train_kernel_density_detector, train_ml_loo_detector, train_shap_autoencoder, train_shap_conv,
    train_shap_mlp, DetectorInput, DetectorKind, DetectorModel, MapSet, Origin, Verdict,
};
use shapshield_core::harness::{load_dataset, run_experiment, timestamped_dir, AttackSpec, ExperimentConfig};
use shapshield_core::nn::Tensor;
use shapshield_core::victims::{train_victim, VictimModel};

#[derive(Parser)]
#[command(name = "shapshield", version, about = "Detect adversarial samples from shifts in their SHAP attributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment TOML (dataset, seeds, victim, attribution and detector settings).
    #[arg(long)]
    config: PathBuf,
    /// Parent of the timestamped output directory [default: the config's output_dir].
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment described by the config.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Train the victim classifier and export its dataset.
    TrainVictim {
        #[command(flatten)]
        common: Common,
    },
    /// Attack the correctly classified test samples.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: PathBuf,
        /// pgd, cw or saliency_sparse.
        #[arg(long)]
        method: String,
        /// L∞ budget (pgd).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Iteration count (Adam steps per binary-search round for cw).
        #[arg(long)]
        iters: Option<usize>,
        /// Feature budget (saliency_sparse).
        #[arg(long)]
        budget: Option<usize>,
        /// Attack at most this many samples.
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Train one detector on the successful pairs of an attack set.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        attack: PathBuf,
        /// shap_mlp, shap_conv, shap_ae_svm, shap_vae_svm, kernel_density or ml_loo.
        #[arg(long)]
        kind: String,
        /// Detector initialization seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score samples with a trained detector.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Score the originals and successful adversarials of this attack set.
        #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
        attack: Option<PathBuf>,
        /// Score every row of a CSV or raster file already in the victim's input space.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(dir) => {
            println!("outputs: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &Common, command: &str) -> Result<Prepared> {
    let cfg = load_config(common)?;
    let dir = timestamped_dir(&cfg.output_dir, &format!("{}-{command}", cfg.name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(Prepared { cfg, dir })
}

fn execute(command: Command) -> Result<PathBuf> {
    match command {
        Command::Run { common } => {
            let out = run_experiment(&load_config(&common)?)?;
            println!("victim accuracy {:.4}", out.summary.victim_accuracy);
            for a in &out.summary.attacks {
                println!("attack {}: success {:.4} over {} samples", a.name, a.success_rate, a.attempted);
            }
            for c in &out.matrix.cells {
                println!(
                    "{:<15} train {:<16} test {:<16} accuracy {:.4} ± {:.4}",
                    c.detector.name(),
                    c.train_attack,
                    c.test_attack,
                    c.accuracy,
                    c.accuracy_std
                );
            }
            Ok(out.run_dir)
        }
        Command::TrainVictim { common } => {
            let ctx = prepare(&common, "train-victim")?;
            let ds = load_dataset(&ctx.cfg.dataset, ctx.cfg.seed)?;
            if ds.kind.is_image() {
                data::write_image_raster(&ctx.dir.join("dataset.raster"), &ds)?;
            } else {
                data::write_csv(&ctx.dir.join("dataset.csv"), &ds)?;
            }
            let victim = train_victim(&ds, &ctx.cfg.victim.resolve(ds.kind, ctx.cfg.seed))?;
            victim.save(&ctx.dir.join("victim.json"))?;
            let (tx, ty) = ds.test();
            println!("test accuracy {:.4}", victim.accuracy(&tx, &ty)?);
            Ok(ctx.dir)
        }
        Command::Attack {
            common,
            victim,
            method,
            epsilon,
            iters,
            budget,
            max_samples,
        } => {
            let ctx = prepare(&common, "attack")?;
            let (ds, victim) = dataset_and_victim(&ctx.cfg, &victim)?;
            let spec = AttackSpec {
                method: method.clone(),
                epsilon,
                step_size: None,
                max_iters: iters,
                random_start: None,
                c_init: None,
                binary_search_steps: None,
                kappa: None,
                cw_lr: None,
                budget,
                sparse_step: None,
                clamp: None,
            };
            let acfg = spec.resolve(ctx.cfg.seed)?;
            let (test_x, test_y) = ds.test();
            let predicted = victim.labels(&test_x)?;
            let mut pool: Vec<usize> = (0..test_y.len()).filter(|&i| predicted[i] == test_y[i]).collect();
            if let Some(cap) = max_samples {
                pool.truncate(cap);
            }
            if pool.is_empty() {
                bail!("the victim classifies no test sample correctly");
            }
            let xs = test_x.select(&pool);
            let ys: Vec<u8> = pool.iter().map(|&i| test_y[i]).collect();
            let results = attack_batch(&victim, &xs, &ys, &acfg)?;
            let set = AttackSet {
                config: acfg,
                labels: ys,
                results,
            };
            set.save(&ctx.dir.join("attack.json"))?;
            println!("{method}: success {:.4} over {} samples", set.success_rate(), set.results.len());
            Ok(ctx.dir)
        }
        Command::TrainDetector {
            common,
            victim,
            attack,
            kind,
            seed,
        } => {
            let ctx = prepare(&common, "train-detector")?;
            let kind = DetectorKind::parse(&kind)?;
            let (ds, victim) = dataset_and_victim(&ctx.cfg, &victim)?;
            let set = AttackSet::load(&attack)?;
            let (genuine, adversarial) = successful_pairs(&set)?;
            let det = train_detector(&ctx.cfg, kind, seed, &ds, &victim, &genuine, &adversarial)?;
            det.save(&ctx.dir.join("detector.json"))?;
            let (g, a) = score(&ctx.cfg, &ds, &victim, &det, &genuine, &adversarial)?;
            println!("{} training accuracy {:.4} on {} pairs", kind.name(), accuracy(&g, &a), genuine.batch_len());
            Ok(ctx.dir)
        }
        Command::Detect {
            common,
            victim,
            detector,
            attack,
            samples,
        } => {
            let ctx = prepare(&common, "detect")?;
            let (ds, victim) = dataset_and_victim(&ctx.cfg, &victim)?;
            let det = DetectorModel::load(&detector)?;
            let mut csv = String::from("sample,origin,score,verdict\n");
            if let Some(path) = attack {
                let set = AttackSet::load(&path)?;
                let (genuine, adversarial) = successful_pairs(&set)?;
                let (g, a) = score(&ctx.cfg, &ds, &victim, &det, &genuine, &adversarial)?;
                for (origin, verdicts) in [("genuine", &g), ("adversarial", &a)] {
                    for (i, (s, v)) in verdicts.iter().enumerate() {
                        csv.push_str(&format!("{i},{origin},{s:?},{}\n", verdict_name(*v)));
                    }
                }
                let acc = accuracy(&g, &a);
                println!("accuracy {acc:.4} on {} genuine and {} adversarial samples", g.len(), a.len());
                fs::write(ctx.dir.join("detection.json"), serde_json::to_string_pretty(&json!({ "accuracy": acc }))?)?;
            } else if let Some(path) = samples {
                let xs = read_samples(&path, ctx.cfg.seed)?;
                for (i, (s, v)) in score_inputs(&ctx.cfg, &ds, &victim, &det, &xs, Origin::Genuine)?.iter().enumerate() {
                    csv.push_str(&format!("{i},unknown,{s:?},{}\n", verdict_name(*v)));
                }
            }
            fs::write(ctx.dir.join("verdicts.csv"), csv)?;
            Ok(ctx.dir)
        }
    }
}

fn dataset_and_victim(cfg: &ExperimentConfig, victim: &Path) -> Result<(Dataset, VictimModel)> {
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let victim = VictimModel::load(victim).with_context(|| format!("loading victim {}", victim.display()))?;
    if victim.sample_shape() != ds.sample_shape() {
        bail!(
            "victim expects samples shaped {:?} but the config's dataset has {:?}",
            victim.sample_shape(),
            ds.sample_shape()
        );
    }
    Ok((ds, victim))
}

fn successful_pairs(set: &AttackSet) -> Result<(Tensor, Tensor)> {
    let ok: Vec<_> = set.results.iter().filter(|r| r.success).collect();
    if ok.is_empty() {
        bail!("the attack set has no successful adversarial samples");
    }
    let genuine = Tensor::stack(&ok.iter().map(|r| &r.original).collect::<Vec<_>>())?;
    let adversarial = Tensor::stack(&ok.iter().map(|r| &r.adversarial).collect::<Vec<_>>())?;
    Ok((genuine, adversarial))
}

fn maps(cfg: &ExperimentConfig, ds: &Dataset, victim: &VictimModel, xs: &Tensor, origin: Origin) -> Result<MapSet> {
    let (train_x, _) = ds.train();
    let spec = &cfg.attribution;
    let bg = BackgroundSet::from_training(&train_x, spec.background_size, cfg.seed)?;
    let cache = spec.cache_dir.as_deref().map(AttributionCache::open).transpose()?;
    let values = gradient_shap_cached(victim, xs, &bg, spec.n_path_samples, cfg.seed, cache.as_ref())?;
    Ok(MapSet::from_maps(&values, origin)?)
}

fn train_detector(
    cfg: &ExperimentConfig,
    kind: DetectorKind,
    seed: u64,
    ds: &Dataset,
    victim: &VictimModel,
    genuine: &Tensor,
    adversarial: &Tensor,
) -> Result<DetectorModel> {
    let dcfg = cfg.detectors.config(kind, seed);
    let (train_x, train_y) = ds.train();
    let det = match kind {
        DetectorKind::KernelDensity => {
            train_kernel_density_detector(victim, &train_x, &train_y, genuine, adversarial, dcfg.bandwidth)?
        }
        DetectorKind::MlLoo => train_ml_loo_detector(victim, &NormStats::compute(&train_x)?, genuine, adversarial)?,
        _ => {
            let g = maps(cfg, ds, victim, genuine, Origin::Genuine)?;
            let a = maps(cfg, ds, victim, adversarial, Origin::Adversarial)?;
            match kind {
                DetectorKind::ShapMlp => train_shap_mlp(&g, &a, &dcfg)?,
                DetectorKind::ShapConv => train_shap_conv(&g, &a, &dcfg)?,
                _ => {
                    // The autoencoder learns correctly classified training samples only.
                    let predicted = victim.labels(&train_x)?;
                    let mut ok: Vec<usize> = (0..train_y.len()).filter(|&i| predicted[i] == train_y[i]).collect();
                    ok.truncate(cfg.detectors.ae_samples);
                    let ae_maps = maps(cfg, ds, victim, &train_x.select(&ok), Origin::Genuine)?;
                    let ae = train_shap_autoencoder(&ae_maps, kind == DetectorKind::ShapVaeSvm, &dcfg)?;
                    attach_svm(&ae, &g, &a, dcfg.svm_c)?
                }
            }
        }
    };
    Ok(det)
}

type Scored = Vec<(f64, Verdict)>;

fn score_inputs(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    victim: &VictimModel,
    det: &DetectorModel,
    xs: &Tensor,
    origin: Origin,
) -> Result<Scored> {
    let verdicts = if det.kind.uses_maps() {
        let m = maps(cfg, ds, victim, xs, origin)?;
        detect(det, &DetectorInput::Maps(&m))?
    } else {
        detect(det, &DetectorInput::Samples { victim, xs })?
    };
    Ok(verdicts.into_iter().map(|v| (v.score, v.label)).collect())
}

fn score(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    victim: &VictimModel,
    det: &DetectorModel,
    genuine: &Tensor,
    adversarial: &Tensor,
) -> Result<(Scored, Scored)> {
    Ok((
        score_inputs(cfg, ds, victim, det, genuine, Origin::Genuine)?,
        score_inputs(cfg, ds, victim, det, adversarial, Origin::Adversarial)?,
    ))
}

fn accuracy(genuine: &Scored, adversarial: &Scored) -> f64 {
    let right = genuine.iter().filter(|v| v.1 == Verdict::Genuine).count()
        + adversarial.iter().filter(|v| v.1 == Verdict::Adversarial).count();
    right as f64 / (genuine.len() + adversarial.len()) as f64
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Genuine => "genuine",
        Verdict::Adversarial => "adversarial",
    }
}

fn read_samples(path: &Path, seed: u64) -> Result<Tensor> {
    let ds = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => data::read_csv(path, seed)?,
        Some("raster") => data::read_image_raster(path, seed)?,
        _ => bail!("{}: expected a .csv or .raster file", path.display()),
    };
    Ok(ds.features)
}
