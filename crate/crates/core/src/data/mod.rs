//! Synthetic datasets, the 80/20 split, and per-feature standardization.

pub mod raster;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Features whose training standard deviation falls below this map to zero.
pub const DEGENERATE_STD: f64 = 1e-12;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    Tabular { features: usize },
    Image { channels: usize, side: usize },
}

impl DataKind {
    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            DataKind::Tabular { features } => vec![features],
            DataKind::Image { channels, side } => vec![channels, side, side],
        }
    }

    pub fn feature_count(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DataKind::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle into disjoint train/test sets with `round(0.2·n)` test samples.
    pub fn random(n: usize, seed: u64) -> Split {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (n as f64 * TEST_FRACTION).round() as usize;
        let test = idx[..n_test].to_vec();
        let train = idx[n_test..].to_vec();
        Split { train, test }
    }
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over the rows of `values` (leading axis = samples).
    pub fn compute(values: &Tensor) -> Result<NormStats> {
        let n = values.batch_len();
        if n == 0 {
            return Err(Error::invalid("normalization statistics need at least one sample"));
        }
        let d = values.sample_len();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(values.sample(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(values.sample(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    /// Per-feature means with one shared scale: the root-mean-square deviation over all features.
    /// Keeps the relative magnitudes of features intact.
    pub fn pooled(values: &Tensor) -> Result<NormStats> {
        let per = NormStats::compute(values)?;
        let rms = (per.std.iter().map(|s| s * s).sum::<f64>() / per.dim().max(1) as f64).sqrt();
        Ok(NormStats {
            std: vec![rms; per.dim()],
            mean: per.mean,
        })
    }

    pub fn identity(d: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(x − mean) / std` per feature; features with `std < 1e-12` map to 0.
pub fn standardize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if values.sample_len() != stats.dim() {
        return Err(Error::shape(
            "standardize",
            format!("{} features per sample", stats.dim()),
            values.shape(),
        ));
    }
    let d = stats.dim();
    let mut out = values.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let f = j % d;
        let s = stats.std[f];
        *v = if s < DEGENERATE_STD { 0.0 } else { (*v - stats.mean[f]) / s };
    }
    Ok(out)
}

/// Inverse of [`standardize`] on non-degenerate features; degenerate ones return the mean.
pub fn unstandardize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if values.sample_len() != stats.dim() {
        return Err(Error::shape(
            "unstandardize",
            format!("{} features per sample", stats.dim()),
            values.shape(),
        ));
    }
    let d = stats.dim();
    let mut out = values.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let f = j % d;
        let s = stats.std[f];
        *v = if s < DEGENERATE_STD { stats.mean[f] } else { *v * s + stats.mean[f] };
    }
    Ok(out)
}

/// Labeled samples with a fixed split and training-split normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[n, ...sample_shape]`
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub kind: DataKind,
    pub split: Split,
    pub norm_stats: NormStats,
}

impl Dataset {
    /// Assembles a dataset, drawing the split from `split_seed` and statistics from the train part.
    pub fn new(features: Tensor, labels: Vec<u8>, kind: DataKind, split_seed: u64) -> Result<Dataset> {
        let mut expected = vec![labels.len()];
        expected.extend(kind.sample_shape());
        if features.shape() != expected.as_slice() {
            return Err(Error::shape("dataset", format!("{expected:?}"), features.shape()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be binary"));
        }
        let split = Split::random(labels.len(), split_seed);
        if split.train.is_empty() || split.test.is_empty() {
            return Err(Error::invalid("dataset too small for an 80/20 split"));
        }
        let norm_stats = NormStats::compute(&features.select(&split.train))?;
        Ok(Dataset {
            features,
            labels,
            kind,
            split,
            norm_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.kind.sample_shape()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape(), self.features.sample(i).to_vec()).expect("sample shape")
    }

    pub fn subset(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        (self.features.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn train(&self) -> (Tensor, Vec<u8>) {
        self.subset(&self.split.train)
    }

    pub fn test(&self) -> (Tensor, Vec<u8>) {
        self.subset(&self.split.test)
    }

    /// Copy whose features are standardized with this dataset's training statistics.
    pub fn standardized(&self) -> Result<Dataset> {
        let features = standardize(&self.features, &self.norm_stats)?;
        Ok(Dataset {
            norm_stats: NormStats::compute(&features.select(&self.split.train))?,
            features,
            ..self.clone()
        })
    }
}

fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(rng);
    labels
}

/// Number of class-informative dimensions for `m` tabular features; the rest are noise.
pub fn informative_count(m: usize) -> usize {
    (m / 4).max(2)
}

/// Two-class Gaussian mixture: a sparse set of dimensions carries shifted class means,
/// every other dimension is unit-variance noise.
pub fn gen_tabular(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    if n < 100 || m < 4 {
        return Err(Error::invalid(format!("gen_tabular needs n >= 100 and m >= 4, got n={n}, m={m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = informative_count(m);
    let mut dims: Vec<usize> = (0..m).collect();
    dims.shuffle(&mut rng);
    let informative = &dims[..k];
    // Class means at ±shift; ‖shift‖ = 1.5 puts the Bayes accuracy near Φ(1.5) ≈ 0.93.
    let raw: Vec<f64> = (0..k)
        .map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut shift = vec![0.0; m];
    for (&d, r) in informative.iter().zip(&raw) {
        shift[d] = 1.5 * r / norm;
    }
    let labels = balanced_labels(n, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * m);
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        data.extend(shift.iter().map(|s| sign * s + noise.sample(&mut rng)));
    }
    let features = Tensor::new(vec![n, m], data)?;

    // The Bayes direction on the informative dims must separate the classes.
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let score: f64 = features.sample(i).iter().zip(&shift).map(|(x, s)| x * s).sum();
            (score >= 0.0) == (y == 1)
        })
        .count();
    let probe = correct as f64 / n as f64;
    if probe < 0.85 {
        return Err(Error::invalid(format!(
            "generator self-check failed: linear probe accuracy {probe:.3} < 0.85"
        )));
    }
    Dataset::new(features, labels, DataKind::Tabular { features: m }, seed.wrapping_add(1))
}

/// Radius ranges, as fractions of the image side, for the two blob classes.
pub const SMALL_BLOB: (f64, f64) = (0.06, 0.0975);
pub const LARGE_BLOB: (f64, f64) = (0.0975, 0.15);
const BACKGROUND: f64 = 0.15;
const BLOB: f64 = 0.64;
/// Texture noise inside the blob.
const PIXEL_NOISE: f64 = 0.1;
/// Faint sensor noise on the otherwise flat background.
const BACKGROUND_NOISE: f64 = 0.001;
const COVER_CUTOFF: f64 = 1e-3;
/// Maximum offset of the blob centre, in pixels.
const JITTER: f64 = 1.5;

/// Two-class images: a textured central blob whose radius depends on the class, on a
/// nearly flat background.
///
/// Pixels are clamped to [0, 1]. Class 1 draws its radius from [`LARGE_BLOB`], class 0
/// from [`SMALL_BLOB`]; the centre jitters by up to [`JITTER`] pixels.
pub fn gen_images(n: usize, side: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if side < 16 || channels == 0 || n < 10 {
        return Err(Error::invalid(format!(
            "gen_images needs side >= 16, channels >= 1 and n >= 10, got side={side}, channels={channels}, n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, &mut rng);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("pixel noise");
    let faint = Normal::new(0.0, BACKGROUND_NOISE).expect("background noise");
    let s = side as f64;
    let mut data = Vec::with_capacity(n * channels * side * side);
    for &y in &labels {
        let (lo, hi) = if y == 1 { LARGE_BLOB } else { SMALL_BLOB };
        let radius = rng.random_range(lo..hi) * s;
        let cx = (s - 1.0) / 2.0 + rng.random_range(-JITTER..JITTER);
        let cy = (s - 1.0) / 2.0 + rng.random_range(-JITTER..JITTER);
        let gain = rng.random_range(0.9..1.1);
        for _ in 0..channels {
            for i in 0..side {
                for j in 0..side {
                    let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                    // Anti-aliased disc edge.
                    let cover = 1.0 / (1.0 + ((d - radius) / 0.5).exp());
                    let cover = if cover < COVER_CUTOFF { 0.0 } else { cover };
                    let v = BACKGROUND + cover * (gain * (BLOB - BACKGROUND) + noise.sample(&mut rng)) + faint.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let features = Tensor::new(vec![n, channels, side, side], data)?;
    Dataset::new(features, labels, DataKind::Image { channels, side }, seed.wrapping_add(1))
}

/// Writes a tabular dataset as CSV with a `label,f0,f1,...` header.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let DataKind::Tabular { features: m } = ds.kind else {
        return Err(Error::invalid("CSV export is for tabular datasets; use the raster format for images"));
    };
    let mut out = String::from("label");
    for j in 0..m {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.labels[i].to_string());
        for v in ds.features.sample(i) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_csv(path: &Path, split_seed: u64) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let m = header.split(',').count() - 1;
    if m == 0 || !header.starts_with("label") {
        return Err(bad("header must be `label,f0,...`".into()));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut cells = line.split(',');
        let label: u8 = cells
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad label", ln + 2)))?;
        let row: Vec<f64> = cells
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
        if row.len() != m {
            return Err(bad(format!("line {}: expected {m} features, found {}", ln + 2, row.len())));
        }
        labels.push(label);
        data.extend(row);
    }
    let features = Tensor::new(vec![labels.len(), m], data)?;
    Dataset::new(features, labels, DataKind::Tabular { features: m }, split_seed)
}

pub fn write_image_raster(path: &Path, ds: &Dataset) -> Result<()> {
    if !ds.kind.is_image() {
        return Err(Error::invalid("raster export is for image datasets; use CSV for tabular"));
    }
    raster::write_raster(path, &ds.features, Some(&ds.labels))
}

pub fn read_image_raster(path: &Path, split_seed: u64) -> Result<Dataset> {
    let r = raster::read_raster(path)?;
    let s = r.pixels.shape().to_vec();
    if s[2] != s[3] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "dataset rasters must be square".into(),
        });
    }
    let labels = r.labels.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "dataset raster carries no labels".into(),
    })?;
    Dataset::new(
        r.pixels,
        labels,
        DataKind::Image {
            channels: s[1],
            side: s[2],
        },
        split_seed,
    )
}
