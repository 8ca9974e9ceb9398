//! Synthetic source data and a grid of shifted test sets.
//!
//! Features are Gaussian clusters around random class centres. Each test
//! set is sampled fresh for its `(family, severity)` point and then shifted;
//! labels always stay the generating class.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_csv, read_json, write_csv, write_json, Dataset};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::{StreamKey, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFamily {
    MeanShift,
    CovScale,
    FeatureRotation,
    AdditiveNoise,
    ClassPrior,
}

impl ShiftFamily {
    pub const ALL: [ShiftFamily; 5] = [
        ShiftFamily::MeanShift,
        ShiftFamily::CovScale,
        ShiftFamily::FeatureRotation,
        ShiftFamily::AdditiveNoise,
        ShiftFamily::ClassPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftFamily::MeanShift => "mean_shift",
            ShiftFamily::CovScale => "cov_scale",
            ShiftFamily::FeatureRotation => "feature_rotation",
            ShiftFamily::AdditiveNoise => "additive_noise",
            ShiftFamily::ClassPrior => "class_prior",
        }
    }
}

impl fmt::Display for ShiftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown shift family {s:?}")))
    }
}

/// Generator settings. Shift magnitudes are per unit of severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Source rows per class, split 80/20 into train and validation.
    pub per_class: usize,
    /// Norm of every class centre.
    pub separation: f64,
    pub seed: u64,
    /// Rows per shifted test set.
    pub test_size: usize,
    pub families: Vec<ShiftFamily>,
    pub severities: Vec<u32>,
    /// Mean shift length per severity.
    pub delta: f64,
    /// Covariance inflation per severity: `Σ ← (1 + s·γ)Σ`.
    pub gamma: f64,
    /// Rotation angle per severity, radians.
    pub phi: f64,
    /// Added noise variance per severity.
    pub nu: f64,
    /// Class-prior skew per severity: `π_k ∝ exp(−s·λ·k/(K−1))`.
    pub prior_strength: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            num_classes: 4,
            dim: 16,
            per_class: 500,
            separation: 3.0,
            seed: 2024,
            test_size: 2000,
            families: ShiftFamily::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            delta: 1.6,
            gamma: 3.0,
            phi: 0.4,
            nu: 4.0,
            prior_strength: 0.8,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if self.per_class == 0 {
            return Err(Error::EmptyClass("per_class is 0, every class would be empty".into()));
        }
        if self.per_class < 2 {
            return Err(Error::InsufficientData(
                "per_class must be >= 2 to give every class a training and a validation row".into(),
            ));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidParameter("test_size must be >= 1".into()));
        }
        if self.families.contains(&ShiftFamily::FeatureRotation) && self.dim < 2 {
            return Err(Error::InvalidParameter("feature rotation needs dim >= 2".into()));
        }
        let mags = [self.separation, self.delta, self.gamma, self.phi, self.nu, self.prior_strength];
        if !mags.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidParameter("shift magnitudes must be finite and >= 0".into()));
        }
        if self.severities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("severities must be strictly increasing".into()));
        }
        let mut fams = self.families.clone();
        fams.sort();
        fams.dedup();
        if fams.len() != self.families.len() {
            return Err(Error::InvalidParameter("families listed twice".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShiftedSet {
    pub family: ShiftFamily,
    pub severity: u32,
    pub data: Dataset,
}

#[derive(Debug, Clone)]
pub struct ShiftSuite {
    pub train: Dataset,
    pub validation: Dataset,
    pub tests: Vec<ShiftedSet>,
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
}

pub fn set_name(family: ShiftFamily, severity: u32) -> String {
    format!("{}_s{severity}", family.name())
}

fn unit_vector(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Class centres: random unit directions scaled by `separation`, one per row.
pub fn class_centers(cfg: &BenchConfig) -> Matrix {
    let mut rng = StreamKey::new(cfg.seed).with_str("centers").rng();
    let mut c = Matrix::zeros(cfg.num_classes, cfg.dim);
    for k in 0..cfg.num_classes {
        let u = unit_vector(&mut rng, cfg.dim);
        for (j, v) in u.into_iter().enumerate() {
            c[(k, j)] = cfg.separation * v;
        }
    }
    c
}

fn sample_rows(centers: &Matrix, labels: &[usize], rng: &mut StreamRng) -> Matrix {
    Matrix::from_fn(labels.len(), centers.cols(), |i, j| {
        let z: f64 = StandardNormal.sample(rng);
        centers[(labels[i], j)] + z
    })
}

/// Source train and validation sets, stratified 80/20 per class.
pub fn gen_source(cfg: &BenchConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let centers = class_centers(cfg);
    let mut rng = StreamKey::new(cfg.seed).with_str("source").rng();
    let labels: Vec<usize> = (0..cfg.num_classes).flat_map(|k| std::iter::repeat_n(k, cfg.per_class)).collect();
    let x = sample_rows(&centers, &labels, &mut rng);
    let n_train = ((cfg.per_class as f64) * 0.8).floor().max(1.0) as usize;
    let n_train = n_train.min(cfg.per_class - 1);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for k in 0..cfg.num_classes {
        let base = k * cfg.per_class;
        train_idx.extend(base..base + n_train);
        val_idx.extend(base + n_train..base + cfg.per_class);
    }
    train_idx.shuffle(&mut rng);
    val_idx.shuffle(&mut rng);
    let all = Dataset::new("source", x, Some(labels), cfg.num_classes)?;
    Ok((
        all.select(&train_idx)?.renamed("source_train"),
        all.select(&val_idx)?.renamed("source_val"),
    ))
}

fn balanced_labels(m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|i| i % k).collect()
}

/// Class priors for the label-shift family.
fn prior_weights(k: usize, severity: u32, strength: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|c| (-(severity as f64) * strength * c as f64 / (k - 1) as f64).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Labels with exact class counts `round(m·π_k)`, largest-remainder rounding.
fn prior_labels(m: usize, prior: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = prior.iter().map(|p| p * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = m - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
}

/// Orthonormal basis of the plane through the first two class centres,
/// falling back to the first two axes when they are collinear.
fn rotation_plane(centers: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = centers.cols();
    let normalize = |v: Vec<f64>| -> Option<Vec<f64>> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (n > 1e-9).then(|| v.into_iter().map(|a| a / n).collect())
    };
    let axis = |i: usize| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let u = normalize(centers.row(0).to_vec()).unwrap_or_else(|| axis(0));
    let b = centers.row(1).to_vec();
    let dot: f64 = b.iter().zip(&u).map(|(a, c)| a * c).sum();
    let w = normalize(b.iter().zip(&u).map(|(a, c)| a - dot * c).collect()).unwrap_or_else(|| {
        let e = axis(if u[0].abs() < 0.9 { 0 } else { 1 });
        let dot: f64 = e.iter().zip(&u).map(|(a, c)| a * c).sum();
        normalize(e.iter().zip(&u).map(|(a, c)| a - dot * c).collect()).expect("axis off the line")
    });
    (u, w)
}

/// Fresh sample for one suite point with the family's shift applied.
pub fn gen_shifted(cfg: &BenchConfig, family: ShiftFamily, severity: u32) -> Result<Dataset> {
    cfg.validate()?;
    let centers = class_centers(cfg);
    let (k, d, m) = (cfg.num_classes, cfg.dim, cfg.test_size);
    let s = severity as f64;
    let mut rng = StreamKey::new(cfg.seed)
        .with_str("test")
        .with_str(family.name())
        .with_u64(severity as u64)
        .rng();
    let mut labels = if family == ShiftFamily::ClassPrior {
        prior_labels(m, &prior_weights(k, severity, cfg.prior_strength))
    } else {
        balanced_labels(m, k)
    };
    labels.shuffle(&mut rng);
    let mut x = sample_rows(&centers, &labels, &mut rng);
    match family {
        ShiftFamily::MeanShift => {
            let u = unit_vector(&mut StreamKey::new(cfg.seed).with_str("mean_shift_dir").rng(), d);
            for i in 0..m {
                for (j, uj) in u.iter().enumerate() {
                    x[(i, j)] += s * cfg.delta * uj;
                }
            }
        }
        ShiftFamily::CovScale => {
            let f = (1.0 + s * cfg.gamma).sqrt();
            for i in 0..m {
                for j in 0..d {
                    let c = centers[(labels[i], j)];
                    x[(i, j)] = c + f * (x[(i, j)] - c);
                }
            }
        }
        ShiftFamily::FeatureRotation => {
            let (u, w) = rotation_plane(&centers);
            let (sin, cos) = (s * cfg.phi).sin_cos();
            for i in 0..m {
                let row = x.row(i);
                let a: f64 = row.iter().zip(&u).map(|(p, q)| p * q).sum();
                let b: f64 = row.iter().zip(&w).map(|(p, q)| p * q).sum();
                let (a2, b2) = (cos * a - sin * b, sin * a + cos * b);
                let r = x.row_mut(i);
                for j in 0..d {
                    r[j] += (a2 - a) * u[j] + (b2 - b) * w[j];
                }
            }
        }
        ShiftFamily::AdditiveNoise => {
            let sd = (s * cfg.nu).sqrt();
            for v in x.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sd * z;
            }
        }
        ShiftFamily::ClassPrior => {}
    }
    Dataset::new(set_name(family, severity), x, Some(labels), k)
}

/// Source data plus one shifted set per `(family, severity)`, generated in
/// parallel. Order follows `cfg.families` then `cfg.severities`.
pub fn gen_shift_suite(cfg: &BenchConfig) -> Result<ShiftSuite> {
    let (train, validation) = gen_source(cfg)?;
    let points: Vec<(ShiftFamily, u32)> = cfg
        .families
        .iter()
        .flat_map(|&f| cfg.severities.iter().map(move |&s| (f, s)))
        .collect();
    let tests = points
        .par_iter()
        .map(|&(family, severity)| {
            Ok(ShiftedSet {
                family,
                severity,
                data: gen_shifted(cfg, family, severity)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftSuite {
        train,
        validation,
        tests,
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        dim: cfg.dim,
    })
}

pub const MANIFEST: &str = "suite.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub family: ShiftFamily,
    pub severity: u32,
    pub file: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub train: String,
    pub validation: String,
    pub tests: Vec<ManifestEntry>,
}

/// One labelled CSV per dataset plus a `suite.json` manifest.
pub fn write_suite(suite: &ShiftSuite, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = |ds: &Dataset| format!("{}.csv", ds.name());
    write_csv(&suite.train, dir.join(file(&suite.train)))?;
    write_csv(&suite.validation, dir.join(file(&suite.validation)))?;
    let mut tests = Vec::with_capacity(suite.tests.len());
    for t in &suite.tests {
        write_csv(&t.data, dir.join(file(&t.data)))?;
        tests.push(ManifestEntry {
            name: t.data.name().to_string(),
            family: t.family,
            severity: t.severity,
            file: file(&t.data),
            rows: t.data.len(),
        });
    }
    let manifest = Manifest {
        seed: suite.seed,
        num_classes: suite.num_classes,
        dim: suite.dim,
        train: file(&suite.train),
        validation: file(&suite.validation),
        tests,
    };
    write_json(&manifest, dir.join(MANIFEST))
}

pub fn load_suite(dir: impl AsRef<Path>) -> Result<ShiftSuite> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(dir.join(MANIFEST))?;
    let k = manifest.num_classes;
    let load = |f: &str| -> Result<Dataset> {
        let p: PathBuf = dir.join(f);
        load_csv(&p, true, k)
    };
    let train = load(&manifest.train)?;
    let validation = load(&manifest.validation)?;
    let mut tests = Vec::with_capacity(manifest.tests.len());
    for e in &manifest.tests {
        let data = load(&e.file)?.renamed(e.name.clone());
        if data.dim() != manifest.dim {
            return Err(Error::InvalidInput(format!("{} has {} features, expected {}", e.file, data.dim(), manifest.dim)));
        }
        tests.push(ShiftedSet {
            family: e.family,
            severity: e.severity,
            data,
        });
    }
    if train.dim() != manifest.dim || validation.dim() != manifest.dim {
        return Err(Error::InvalidInput("source feature count disagrees with manifest".into()));
    }
    Ok(ShiftSuite {
        train,
        validation,
        tests,
        seed: manifest.seed,
        num_classes: k,
        dim: manifest.dim,
    })
}
