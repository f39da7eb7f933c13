use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
seed = 2
detector_seeds = [0]
dataset = { kind = "tabular", n = 400, features = 8 }

[[attacks]]
method = "saliency_sparse"
budget = 3

[detectors]
kinds = ["shap_mlp"]
mlp_epochs = 10
"#;

fn shapshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapshield")).args(args).output().unwrap()
}

fn outputs(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout.lines().find_map(|l| l.strip_prefix("outputs: ")).expect("no outputs line");
    PathBuf::from(line)
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cli.toml");
    fs::write(&config, CONFIG).unwrap();
    let out = dir.path().join("runs");
    (dir, config.display().to_string(), out.display().to_string())
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn step_by_step_pipeline() {
    let (_keep, config, out) = setup();
    let common = ["--config", config.as_str(), "--output-dir", out.as_str()];

    let trained = outputs(&shapshield(&[&["train-victim"], &common[..]].concat()));
    assert!(trained.starts_with(&out));
    assert!(trained.join("dataset.csv").is_file());
    assert!(trained.join("config.toml").is_file());
    let victim = s(&trained.join("victim.json"));

    let attack_args = ["attack", "--victim", &victim, "--method", "saliency_sparse", "--budget", "3", "--max-samples", "30"];
    let attacked = outputs(&shapshield(&[&attack_args[..], &common[..]].concat()));
    let attack = s(&attacked.join("attack.json"));
    assert!(Path::new(&attack).is_file());

    let det_args = ["train-detector", "--victim", &victim, "--attack", &attack, "--kind", "shap_mlp"];
    let detector = s(&outputs(&shapshield(&[&det_args[..], &common[..]].concat())).join("detector.json"));

    let detect_args = ["detect", "--victim", &victim, "--detector", &detector, "--attack", &attack];
    let detected = outputs(&shapshield(&[&detect_args[..], &common[..]].concat()));
    let verdicts = fs::read_to_string(detected.join("verdicts.csv")).unwrap();
    let mut lines = verdicts.lines();
    assert_eq!(lines.next(), Some("sample,origin,score,verdict"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    let genuine = rows.iter().filter(|r| r[1] == "genuine").count();
    assert_eq!(genuine * 2, rows.len());
    assert!(rows.iter().all(|r| r[3] == "genuine" || r[3] == "adversarial"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(detected.join("detection.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn run_writes_the_full_report() {
    let (_keep, config, out) = setup();
    let dir = outputs(&shapshield(&["run", "--config", &config, "--output-dir", &out]));
    assert!(dir.starts_with(&out));
    for file in ["matrix.csv", "seeds.csv", "summary.json", "config.toml"] {
        assert!(dir.join(file).is_file(), "{file}");
    }
}

#[test]
fn bad_input_exits_nonzero() {
    let (keep, _, out) = setup();
    let bad = keep.path().join("bad.toml");
    fs::write(&bad, CONFIG.replace("mlp_epochs", "mlp_epoch")).unwrap();
    let res = shapshield(&["run", "--config", &s(&bad), "--output-dir", &out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));

    let missing = shapshield(&["train-victim", "--config", &s(&keep.path().join("absent.toml"))]);
    assert!(!missing.status.success());
}
