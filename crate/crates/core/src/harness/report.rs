use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ResultsMatrix;
use crate::data::raster::write_raster;
use crate::data::DataKind;
use crate::detectors::MapSet;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::stats;

/// Samples rendered into `heatmaps/` for image tasks.
pub const HEATMAP_SAMPLES: usize = 4;

#[derive(Debug, Clone)]
pub struct AdversarialMaps {
    pub name: String,
    pub maps: MapSet,
    pub inputs: Tensor,
}

/// Attribution maps aligned by sample: row `i` of every set explains the same original.
#[derive(Debug, Clone)]
pub struct AttributionSets {
    pub kind: DataKind,
    pub genuine: MapSet,
    pub genuine_inputs: Tensor,
    pub adversarial: Vec<AdversarialMaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanEntry {
    pub reference: String,
    pub compared: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub spearman: Vec<SpearmanEntry>,
}

/// Mean absolute attribution per feature.
pub fn mean_abs_importance(values: &Tensor) -> Vec<f64> {
    let n = values.batch_len();
    let d = values.sample_len();
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(values.sample(i)) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= n.max(1) as f64);
    out
}

/// Writes one flattened sample per row under an `f0,f1,...` header.
pub fn write_rows_csv(path: &Path, values: &Tensor) -> Result<()> {
    let d = values.sample_len();
    let mut out = (0..d).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..values.batch_len() {
        let row: Vec<String> = values.sample(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn matrix_csv(m: &ResultsMatrix) -> String {
    let mut out = String::from("detector,train_attack,test_attack,accuracy,accuracy_std,precision,recall,n_genuine,n_adversarial\n");
    for c in &m.cells {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            c.detector.name(),
            c.train_attack,
            c.test_attack,
            c.accuracy,
            c.accuracy_std,
            c.precision,
            c.recall,
            c.n_genuine,
            c.n_adversarial
        );
    }
    out
}

fn seeds_csv(m: &ResultsMatrix) -> String {
    let mut out = String::from("detector,train_attack,test_attack,seed_index,accuracy\n");
    for c in &m.cells {
        for (s, a) in c.per_seed.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{s},{a:.6}", c.detector.name(), c.train_attack, c.test_attack);
        }
    }
    out
}

fn first_rows(t: &Tensor) -> Tensor {
    let k = t.batch_len().min(HEATMAP_SAMPLES);
    t.select(&(0..k).collect::<Vec<_>>())
}

/// Writes matrix, per-seed, importance, Spearman and (for images) heatmap reports into `dir`.
pub fn emit_reports(matrix: &ResultsMatrix, sets: &AttributionSets, dir: &Path) -> Result<ReportSummary> {
    if sets.genuine.len() < 4 {
        return Err(Error::invalid("reports need at least four genuine maps"));
    }
    fs::write(dir.join("matrix.csv"), matrix_csv(matrix))?;
    fs::write(dir.join("seeds.csv"), seeds_csv(matrix))?;

    let n = sets.genuine.len();
    let half_a = sets.genuine.select(&(0..n / 2).collect::<Vec<_>>());
    let half_b = sets.genuine.select(&(n / 2..n).collect::<Vec<_>>());
    let mut columns: Vec<(String, Vec<f64>)> = vec![
        ("genuine".into(), mean_abs_importance(&sets.genuine.values)),
        ("genuine_half_a".into(), mean_abs_importance(&half_a.values)),
        ("genuine_half_b".into(), mean_abs_importance(&half_b.values)),
    ];
    for a in &sets.adversarial {
        columns.push((a.name.clone(), mean_abs_importance(&a.maps.values)));
    }
    let mut imp = String::from("feature");
    for (name, _) in &columns {
        imp.push(',');
        imp.push_str(name);
    }
    imp.push('\n');
    for j in 0..columns[0].1.len() {
        imp.push_str(&format!("f{j}"));
        for (_, v) in &columns {
            let _ = write!(imp, ",{:?}", v[j]);
        }
        imp.push('\n');
    }
    fs::write(dir.join("shap_importance.csv"), imp)?;

    let mut spearman = vec![SpearmanEntry {
        reference: "genuine_half_a".into(),
        compared: "genuine_half_b".into(),
        rho: stats::spearman(&columns[1].1, &columns[2].1)?,
    }];
    for (name, v) in &columns[3..] {
        spearman.push(SpearmanEntry {
            reference: "genuine".into(),
            compared: name.clone(),
            rho: stats::spearman(&columns[0].1, v)?,
        });
    }
    let mut sp = String::from("reference,compared,rho\n");
    for e in &spearman {
        let _ = writeln!(sp, "{},{},{:.6}", e.reference, e.compared, e.rho);
    }
    fs::write(dir.join("spearman.csv"), sp)?;

    if sets.kind.is_image() {
        let hm = dir.join("heatmaps");
        fs::create_dir_all(&hm)?;
        write_raster(&hm.join("genuine_inputs.raster"), &first_rows(&sets.genuine_inputs), None)?;
        write_raster(&hm.join("genuine_maps.raster"), &first_rows(&sets.genuine.values), None)?;
        for a in &sets.adversarial {
            write_raster(&hm.join(format!("{}_inputs.raster", a.name)), &first_rows(&a.inputs), None)?;
            write_raster(&hm.join(format!("{}_maps.raster", a.name)), &first_rows(&a.maps.values), None)?;
        }
    }
    Ok(ReportSummary { spearman })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_is_mean_absolute_value() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.0, -3.0, 2.0, 4.0]).unwrap();
        assert_eq!(mean_abs_importance(&t), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn rows_csv_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let t = Tensor::new(vec![2, 2], vec![0.1, -1e-17, 3.0, 4.5]).unwrap();
        write_rows_csv(&p, &t).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("f0,f1"));
        let parsed: Vec<f64> = lines.flat_map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect();
        assert_eq!(parsed, t.data());
    }
}
