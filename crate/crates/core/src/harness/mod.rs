//! End-to-end experiments: victim training, attacks, attributions, detector training
//! and the cross-attack results matrix, with every artifact written to a run directory.

pub mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackSet};
use crate::attribution::{gradient_shap_cached, AttributionCache, BackgroundSet};
use crate::data::{self, DataKind, Dataset, NormStats};
use crate::detectors::{
    attach_svm, detect, kde_features, kde_reference, ml_loo_features, reconstruction_features,
    train_kernel_density_from_features, train_ml_loo_from_features, train_shap_autoencoder, train_shap_conv,
    train_shap_mlp, DetectorInput, DetectorKind, DetectorModel, MapSet, Origin,
};
use crate::error::{Error, Result, StageExt};
use crate::nn::Tensor;
use crate::stats;
use crate::victims::{train_victim, VictimModel};

pub use config::{AttackSpec, AttributionSpec, DatasetSpec, DetectorSpec, ExperimentConfig, VictimSpec};
pub use report::{emit_reports, AdversarialMaps, AttributionSets, ReportSummary, SpearmanEntry};

/// Fewest attacked samples an experiment accepts.
pub const MIN_POOL: usize = 10;

/// Spearman rank correlation of two per-feature mean |SHAP| vectors.
pub fn spearman_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    stats::spearman(a, b)
}

/// One (detector, train attack, test attack) cell aggregated over detector seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub detector: DetectorKind,
    pub train_attack: String,
    pub test_attack: String,
    /// Mean accuracy over seeds.
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub per_seed: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
    /// Test-split counts per seed (identical for every seed).
    pub n_genuine: usize,
    pub n_adversarial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub detectors: Vec<DetectorKind>,
    /// (train attack, test attack) pairs.
    pub columns: Vec<(String, String)>,
    /// Row-major over `detectors × columns`.
    pub cells: Vec<Cell>,
}

impl ResultsMatrix {
    pub fn get(&self, detector: DetectorKind, train: &str, test: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.detector == detector && c.train_attack == train && c.test_attack == test)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.detectors.len() * self.columns.len() {
            return Err(Error::invalid("results matrix is not fully populated"));
        }
        for c in &self.cells {
            if !(0.0..=1.0).contains(&c.accuracy) || c.per_seed.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::invalid(format!("accuracy outside [0, 1] in {}", c.detector.name())));
            }
            if c.n_genuine != c.n_adversarial {
                return Err(Error::invalid(format!("unbalanced cell for {}", c.detector.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub name: String,
    pub attempted: usize,
    pub succeeded: usize,
    pub success_rate: f64,
    /// Victim accuracy (against the original labels) on the successful adversarial samples.
    pub adversarial_accuracy: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub mean_changed_features: f64,
}

/// Mean per-sample reconstruction MSE of held-out genuine versus adversarial maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionCheck {
    pub detector: DetectorKind,
    pub seed: u64,
    pub attack: String,
    pub genuine_mse: f64,
    pub adversarial_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub task: DataKind,
    pub victim_accuracy: f64,
    pub victim_fingerprint: String,
    /// Correctly classified test samples that were attacked.
    pub pool_size: usize,
    /// Samples on which every attack succeeded; these populate all cells.
    pub evaluated_size: usize,
    pub attacks: Vec<AttackSummary>,
    pub spearman: Vec<SpearmanEntry>,
    pub reconstruction: Vec<ReconstructionCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub matrix: ResultsMatrix,
    pub summary: RunSummary,
}

/// `<parent>/<name>-<UTC timestamp>`; not created.
pub fn timestamped_dir(parent: &Path, name: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    parent.join(format!("{name}-{stamp}"))
}

/// Runs `cfg` in a fresh timestamped directory under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_in(cfg, &timestamped_dir(&cfg.output_dir, &cfg.name))
}

/// Builds or reads the dataset; synthetic and CSV records come back standardized.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Tabular { n, features } => data::gen_tabular(*n, *features, seed)?.standardized(),
        DatasetSpec::Image { n, side, channels } => data::gen_images(*n, *side, *channels, seed),
        DatasetSpec::Csv { path } => data::read_csv(path, seed)?.standardized(),
        DatasetSpec::Raster { path } => data::read_image_raster(path, seed),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Maps are written as rasters for image tasks and as `f0,f1,...` CSV otherwise.
fn write_maps(dir: &Path, stem: &str, values: &Tensor) -> Result<()> {
    if values.rank() == 4 {
        data::raster::write_raster(&dir.join(format!("{stem}.raster")), values, None)
    } else {
        report::write_rows_csv(&dir.join(format!("{stem}.csv")), values)
    }
}

fn unique_names(specs: &[AttackSpec]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    specs
        .iter()
        .map(|s| {
            let base = crate::attacks::AttackMethod::parse(&s.method)
                .map(|m| m.name().to_string())
                .unwrap_or_else(|_| s.method.clone());
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 { base } else { format!("{base}_{n}") }
        })
        .collect()
}

#[derive(Default)]
struct Tally {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Tally {
    fn add(&mut self, genuine_scores: &[f64], adversarial_scores: &[f64], threshold: f64) {
        for &s in genuine_scores {
            if s >= threshold { self.fp += 1 } else { self.tn += 1 }
        }
        for &s in adversarial_scores {
            if s >= threshold { self.tp += 1 } else { self.fn_ += 1 }
        }
    }

    fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_).max(1) as f64
    }
}

/// Per-attack sample-level inputs shared by all detector seeds.
struct AttackData {
    name: String,
    inputs: Tensor,
    maps: MapSet,
}

/// Precomputed baseline features for the evaluated samples.
struct BaselineFeatures {
    genuine: Vec<Vec<f64>>,
    adversarial: Vec<Vec<Vec<f64>>>,
}

impl BaselineFeatures {
    fn pick(rows: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| rows[i].clone()).collect()
    }
}

fn scores_for(det: &DetectorModel, maps: &MapSet, feats: Option<Vec<Vec<f64>>>) -> Result<Vec<f64>> {
    match feats {
        Some(f) => det.score_features(f),
        None => Ok(detect(det, &DetectorInput::Maps(maps))?.into_iter().map(|v| v.score).collect()),
    }
}

/// Runs the full pipeline, writing every artifact under `run_dir`.
pub fn run_experiment_in(cfg: &ExperimentConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).stage("setup")?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?).stage("setup")?;

    let ds = load_dataset(&cfg.dataset, cfg.seed).stage("dataset")?;
    if ds.kind.is_image() {
        data::write_image_raster(&run_dir.join("dataset.raster"), &ds).stage("dataset")?;
    } else {
        data::write_csv(&run_dir.join("dataset.csv"), &ds).stage("dataset")?;
    }

    let victim = train_victim(&ds, &cfg.victim.resolve(ds.kind, cfg.seed)).stage("victim")?;
    victim.save(&run_dir.join("victim.json")).stage("victim")?;
    let (test_x, test_y) = ds.test();
    let victim_accuracy = victim.accuracy(&test_x, &test_y).stage("victim")?;

    // Only correctly classified test samples are attacked.
    let predicted = victim.labels(&test_x).stage("attack")?;
    let mut pool: Vec<usize> = (0..test_y.len()).filter(|&i| predicted[i] == test_y[i]).collect();
    if let Some(cap) = cfg.detectors.max_samples {
        pool.truncate(cap);
    }
    let pool_x = test_x.select(&pool);
    let pool_y: Vec<u8> = pool.iter().map(|&i| test_y[i]).collect();

    let names = unique_names(&cfg.attacks);
    let mut sets = Vec::new();
    let mut attack_summaries = Vec::new();
    for (spec, name) in cfg.attacks.iter().zip(&names) {
        let acfg = spec.resolve(cfg.seed).stage("attack")?;
        let results = attack_batch(&victim, &pool_x, &pool_y, &acfg).stage("attack")?;
        let set = AttackSet {
            config: acfg,
            labels: pool_y.clone(),
            results,
        };
        set.save(&run_dir.join(format!("attack_{name}.json"))).stage("attack")?;
        let ok: Vec<usize> = (0..set.results.len()).filter(|&i| set.results[i].success).collect();
        let adv_refs: Vec<&Tensor> = ok.iter().map(|&i| &set.results[i].adversarial).collect();
        let adversarial_accuracy = if ok.is_empty() {
            0.0
        } else {
            let labels: Vec<u8> = ok.iter().map(|&i| pool_y[i]).collect();
            victim.accuracy(&Tensor::stack(&adv_refs)?, &labels).stage("attack")?
        };
        if adversarial_accuracy != 0.0 {
            return Err(Error::invalid(format!(
                "attack {name} reported successes that the victim still classifies correctly"
            )))
            .stage("attack");
        }
        let mean = |f: &dyn Fn(usize) -> f64| ok.iter().map(|&i| f(i)).sum::<f64>() / ok.len().max(1) as f64;
        attack_summaries.push(AttackSummary {
            name: name.clone(),
            attempted: set.results.len(),
            succeeded: ok.len(),
            success_rate: set.success_rate(),
            adversarial_accuracy,
            mean_l2: mean(&|i| set.results[i].l2_norm),
            mean_linf: mean(&|i| set.results[i].linf_norm),
            mean_changed_features: mean(&|i| set.results[i].changed_features() as f64),
        });
        sets.push(set);
    }

    // Every cell uses the same originals, so genuine and adversarial sets stay balanced.
    let evaluated: Vec<usize> = (0..pool.len()).filter(|&i| sets.iter().all(|s| s.results[i].success)).collect();
    if evaluated.len() < MIN_POOL {
        return Err(Error::invalid(format!(
            "only {} samples were successfully attacked by every attack (need {MIN_POOL})",
            evaluated.len()
        )))
        .stage("attack");
    }

    let (train_x, train_y) = ds.train();
    let bg = BackgroundSet::from_training(&train_x, cfg.attribution.background_size, cfg.seed).stage("attribution")?;
    let cache = match &cfg.attribution.cache_dir {
        Some(dir) => Some(AttributionCache::open(dir).stage("attribution")?),
        None => None,
    };
    let n_path = cfg.attribution.n_path_samples;
    let attribute = |xs: &Tensor, origin: Origin| -> Result<MapSet> {
        let maps = gradient_shap_cached(&victim, xs, &bg, n_path, cfg.seed, cache.as_ref())?;
        MapSet::from_maps(&maps, origin)
    };
    let genuine_inputs = pool_x.select(&evaluated);
    let genuine = attribute(&genuine_inputs, Origin::Genuine).stage("attribution")?;
    write_maps(run_dir, "maps_genuine", &genuine.values).stage("attribution")?;
    let mut attacks = Vec::new();
    for (set, name) in sets.iter().zip(&names) {
        let refs: Vec<&Tensor> = evaluated.iter().map(|&i| &set.results[i].adversarial).collect();
        let inputs = Tensor::stack(&refs)?;
        let maps = attribute(&inputs, Origin::Adversarial).stage("attribution")?;
        write_maps(run_dir, &format!("maps_{name}"), &maps.values).stage("attribution")?;
        attacks.push(AttackData {
            name: name.clone(),
            inputs,
            maps,
        });
    }

    let kinds = cfg
        .detectors
        .resolve_kinds(ds.kind, victim.hidden_features(&genuine_inputs.select(&[0]))?.sample_len())
        .stage("detector")?;
    let kde_refs = if kinds.contains(&DetectorKind::KernelDensity) {
        Some(kde_reference(&victim, &train_x, &train_y).stage("detector")?)
    } else {
        None
    };
    let input_stats = NormStats::compute(&train_x).stage("detector")?;
    let mut baseline: BTreeMap<DetectorKind, BaselineFeatures> = BTreeMap::new();
    for &kind in &kinds {
        let features = |xs: &Tensor| -> Result<Vec<Vec<f64>>> {
            match kind {
                DetectorKind::KernelDensity => {
                    let refs = kde_refs.as_ref().expect("reference computed above");
                    Ok(kde_features(&victim, refs, cfg.detectors.bandwidth, xs)?
                        .into_iter()
                        .map(|v| vec![v])
                        .collect())
                }
                _ => ml_loo_features(&victim, &input_stats, xs),
            }
        };
        if !kind.uses_maps() {
            let genuine_f = features(&genuine_inputs).stage("detector")?;
            let adversarial_f = attacks
                .iter()
                .map(|a| features(&a.inputs))
                .collect::<Result<Vec<_>>>()
                .stage("detector")?;
            baseline.insert(
                kind,
                BaselineFeatures {
                    genuine: genuine_f,
                    adversarial: adversarial_f,
                },
            );
        }
    }

    // The autoencoders learn genuine maps from the training split, disjoint from every detection sample.
    let ae_maps = if kinds.iter().any(|k| k.is_semi_supervised()) {
        let train_pred = victim.labels(&train_x).stage("detector")?;
        let mut ok: Vec<usize> = (0..train_y.len()).filter(|&i| train_pred[i] == train_y[i]).collect();
        ok.truncate(cfg.detectors.ae_samples);
        Some(attribute(&train_x.select(&ok), Origin::Genuine).stage("attribution")?)
    } else {
        None
    };

    let det_dir = run_dir.join("detectors");
    fs::create_dir_all(&det_dir).stage("detector")?;
    let n = evaluated.len();
    let n_train = ((n as f64 * cfg.detectors.train_fraction).round() as usize).clamp(1, n - 1);
    // tallies[(kind, train, test)] -> per-seed tallies
    let mut tallies: BTreeMap<(DetectorKind, usize, usize), Vec<Tally>> = BTreeMap::new();
    let mut reconstruction = Vec::new();
    for &seed in &cfg.detector_seeds {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train_idx = order[..n_train].to_vec();
        let mut test_idx = order[n_train..].to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let g_train = genuine.select(&train_idx);
        let g_test = genuine.select(&test_idx);
        for &kind in &kinds {
            let dcfg = cfg.detectors.config(kind, seed);
            let autoencoder = if kind.is_semi_supervised() {
                let ae = train_shap_autoencoder(ae_maps.as_ref().expect("computed above"), kind == DetectorKind::ShapVaeSvm, &dcfg).stage("detector")?;
                let mse = |m: &MapSet| -> Result<f64> {
                    let f = reconstruction_features(&ae, m)?;
                    Ok(f.data().iter().sum::<f64>() / f.len() as f64)
                };
                let genuine_mse = mse(&g_test).stage("detector")?;
                for a in &attacks {
                    let adversarial_mse = mse(&a.maps.select(&test_idx)).stage("detector")?;
                    // Held-out genuine maps must reconstruct strictly better than adversarial ones.
                    if adversarial_mse <= genuine_mse {
                        return Err(Error::invalid(format!(
                            "{} (seed {seed}) reconstructs {} maps no worse than held-out genuine maps: {adversarial_mse:.4} <= {genuine_mse:.4}",
                            kind.name(),
                            a.name
                        )))
                        .stage("detector");
                    }
                    reconstruction.push(ReconstructionCheck {
                        detector: kind,
                        seed,
                        attack: a.name.clone(),
                        genuine_mse,
                        adversarial_mse,
                    });
                }
                Some(ae)
            } else {
                None
            };
            for (ti, train_attack) in attacks.iter().enumerate() {
                let a_train = train_attack.maps.select(&train_idx);
                let det = match kind {
                    DetectorKind::ShapMlp => train_shap_mlp(&g_train, &a_train, &dcfg),
                    DetectorKind::ShapConv => train_shap_conv(&g_train, &a_train, &dcfg),
                    DetectorKind::ShapAeSvm | DetectorKind::ShapVaeSvm => {
                        attach_svm(autoencoder.as_ref().expect("trained above"), &g_train, &a_train, dcfg.svm_c)
                    }
                    DetectorKind::KernelDensity => {
                        let f = &baseline[&kind];
                        let g: Vec<f64> = train_idx.iter().map(|&i| f.genuine[i][0]).collect();
                        let a: Vec<f64> = train_idx.iter().map(|&i| f.adversarial[ti][i][0]).collect();
                        let refs = kde_refs.clone().expect("reference computed above");
                        train_kernel_density_from_features(&victim, refs, dcfg.bandwidth, &g, &a)
                    }
                    DetectorKind::MlLoo => {
                        let f = &baseline[&kind];
                        train_ml_loo_from_features(
                            &victim,
                            input_stats.clone(),
                            BaselineFeatures::pick(&f.genuine, &train_idx),
                            BaselineFeatures::pick(&f.adversarial[ti], &train_idx),
                        )
                    }
                }
                .stage("detector")?;
                det.save(&det_dir.join(format!("{}__{}__seed{seed}.json", kind.name(), train_attack.name)))
                    .stage("detector")?;
                let feats = |rows: Option<&Vec<Vec<f64>>>| rows.map(|r| BaselineFeatures::pick(r, &test_idx));
                let g_scores = scores_for(&det, &g_test, feats(baseline.get(&kind).map(|f| &f.genuine))).stage("detector")?;
                for (ei, test_attack) in attacks.iter().enumerate() {
                    let a_test = test_attack.maps.select(&test_idx);
                    let a_scores = scores_for(&det, &a_test, feats(baseline.get(&kind).map(|f| &f.adversarial[ei])))
                        .stage("detector")?;
                    let mut t = Tally::default();
                    t.add(&g_scores, &a_scores, det.threshold);
                    tallies.entry((kind, ti, ei)).or_default().push(t);
                }
            }
        }
    }

    let mut columns = Vec::new();
    for a in &attacks {
        for b in &attacks {
            columns.push((a.name.clone(), b.name.clone()));
        }
    }
    let mut cells = Vec::new();
    for &kind in &kinds {
        for ti in 0..attacks.len() {
            for ei in 0..attacks.len() {
                let per = &tallies[&(kind, ti, ei)];
                let per_seed: Vec<f64> = per.iter().map(Tally::accuracy).collect();
                let (tp, fp) = per.iter().fold((0, 0), |(tp, fp), t| (tp + t.tp, fp + t.fp));
                let positives: usize = per.iter().map(|t| t.tp + t.fn_).sum();
                cells.push(Cell {
                    detector: kind,
                    train_attack: attacks[ti].name.clone(),
                    test_attack: attacks[ei].name.clone(),
                    accuracy: stats::mean(&per_seed),
                    accuracy_std: stats::std_dev(&per_seed),
                    per_seed,
                    precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
                    recall: tp as f64 / positives.max(1) as f64,
                    n_genuine: n - n_train,
                    n_adversarial: n - n_train,
                });
            }
        }
    }
    let matrix = ResultsMatrix {
        detectors: kinds,
        columns,
        cells,
    };
    matrix.validate().stage("report")?;

    let sets_for_report = AttributionSets {
        kind: ds.kind,
        genuine,
        genuine_inputs,
        adversarial: attacks
            .into_iter()
            .map(|a| AdversarialMaps {
                name: a.name,
                maps: a.maps,
                inputs: a.inputs,
            })
            .collect(),
    };
    let report = emit_reports(&matrix, &sets_for_report, run_dir).stage("report")?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        task: ds.kind,
        victim_accuracy,
        victim_fingerprint: victim.fingerprint(),
        pool_size: pool.len(),
        evaluated_size: n,
        attacks: attack_summaries,
        spearman: report.spearman,
        reconstruction,
    };
    write_json(&run_dir.join("summary.json"), &summary).stage("report")?;
    write_json(&run_dir.join("matrix.json"), &matrix).stage("report")?;
    Ok(ExperimentOutcome {
        run_dir: run_dir.to_path_buf(),
        matrix,
        summary,
    })
}

/// Loads the victim persisted in a run directory.
pub fn load_run_victim(run_dir: &Path) -> Result<VictimModel> {
    VictimModel::load(&run_dir.join("victim.json"))
}
