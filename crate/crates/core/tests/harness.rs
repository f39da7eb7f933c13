use std::fs;
use std::path::Path;

use shapshield_core::data::raster::read_raster;
use shapshield_core::harness::{run_experiment, run_experiment_in, ExperimentConfig, ExperimentOutcome};
use shapshield_core::Error;

fn run(text: &str, dir: &Path) -> ExperimentOutcome {
    run_experiment_in(&ExperimentConfig::from_toml(text).unwrap(), dir).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

const TABULAR: &str = r#"
name = "small"
seed = 3
detector_seeds = [0, 1]
dataset = { kind = "tabular", n = 1000, features = 16 }

[[attacks]]
method = "saliency_sparse"
budget = 3

[[attacks]]
method = "saliency_sparse"
budget = 6

[detectors]
mlp_epochs = 10
ae_samples = 200
"#;

#[test]
fn tabular_run_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(TABULAR, dir.path());
    let kinds = out.matrix.detectors.len();
    // Tabular tasks skip the convolutional detector.
    assert_eq!(kinds, 5);
    assert_eq!(out.matrix.columns.len(), 4);

    let matrix = lines(&dir.path().join("matrix.csv"));
    assert_eq!(matrix[0], "detector,train_attack,test_attack,accuracy,accuracy_std,precision,recall,n_genuine,n_adversarial");
    assert_eq!(matrix.len(), 1 + kinds * 4);
    assert_eq!(lines(&dir.path().join("seeds.csv")).len(), 1 + kinds * 4 * 2);

    let names: Vec<&str> = out.summary.attacks.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names.len(), 2);
    assert_ne!(names[0], names[1]);
    for a in &out.summary.attacks {
        assert_eq!(a.adversarial_accuracy, 0.0);
        assert!(a.mean_changed_features <= 6.0);
        assert!(dir.path().join(format!("attack_{}.json", a.name)).is_file());
    }

    let importance = lines(&dir.path().join("shap_importance.csv"));
    assert_eq!(importance.len(), 1 + 16);
    assert_eq!(importance[0].split(',').count(), 4 + names.len());
    assert_eq!(lines(&dir.path().join("spearman.csv")).len(), 1 + 1 + names.len());
    assert!(out.summary.spearman.iter().all(|e| (-1.0..=1.0).contains(&e.rho)));

    let detectors = fs::read_dir(dir.path().join("detectors")).unwrap().count();
    assert_eq!(detectors, kinds * 2 * 2);
    for r in &out.summary.reconstruction {
        assert!(r.adversarial_mse > r.genuine_mse);
    }
    for c in &out.matrix.cells {
        assert_eq!(c.per_seed.len(), 2);
        assert_eq!(c.n_genuine, c.n_adversarial);
    }
    assert!(!dir.path().join("heatmaps").exists());
}

#[test]
fn image_run_writes_heatmap_rasters() {
    let text = r#"
name = "tiny-image"
seed = 5
detector_seeds = [1]
dataset = { kind = "image", n = 300, side = 16 }

[[attacks]]
method = "pgd"
epsilon = 0.1
step_size = 0.1

[detectors]
kinds = ["shap_mlp", "kernel_density"]
mlp_epochs = 5
"#;
    let dir = tempfile::tempdir().unwrap();
    let out = run(text, dir.path());
    assert_eq!(out.matrix.cells.len(), 2);
    for stem in ["genuine_inputs", "genuine_maps", "pgd_inputs", "pgd_maps"] {
        let r = read_raster(&dir.path().join("heatmaps").join(format!("{stem}.raster"))).unwrap();
        assert_eq!(r.pixels.shape(), &[4, 1, 16, 16], "{stem}");
    }
    let maps = read_raster(&dir.path().join("maps_genuine.raster")).unwrap();
    assert_eq!(maps.pixels.batch_len(), out.summary.evaluated_size);
}

#[test]
fn timestamped_directories_live_under_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(TABULAR).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.detectors.kinds = vec!["shap_mlp".into()];
    cfg.detector_seeds = vec![0];
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.run_dir.parent(), Some(dir.path()));
    let name = out.run_dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("small-") && name.ends_with('Z'), "{name}");
    let saved = fs::read_to_string(out.run_dir.join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&saved).unwrap(), cfg);
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    // The sparse attack is tabular-only.
    let text = r#"
name = "bad"
seed = 5
dataset = { kind = "image", n = 300, side = 16 }
[[attacks]]
method = "saliency_sparse"
"#;
    let err = run_experiment_in(&ExperimentConfig::from_toml(text).unwrap(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "attack", .. }), "{err}");

    let weak = r#"
name = "weak"
seed = 1
dataset = { kind = "tabular", n = 300, features = 8 }
victim = { epochs = 0, min_accuracy = 0.99 }
[[attacks]]
method = "saliency_sparse"
"#;
    let err = run_experiment_in(&ExperimentConfig::from_toml(weak).unwrap(), &dir.path().join("w")).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "victim", .. }), "{err}");
    assert!(err.to_string().contains("victim"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = TABULAR.replace("mlp_epochs = 10", "mlp_epoch = 10");
    assert!(ExperimentConfig::from_toml(&text).is_err());
}
