//! Label-free scores that track test accuracy.
//!
//! Every function here maps a trained classifier and an unlabelled test set
//! (plus source data where the method needs it) to one number. The
//! gradient-norm score is [`gdscore`]; the rest are the comparison
//! baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::labeling::{generate_labels, LabelKind, LabelStrategy};
use crate::model::{objective_and_grad, sgd_fit, LinearClassifier, LossVariant, Targets, TrainConfig};
use crate::numkit::{lp_norm, mean_and_cov, svd_singular_values, trace_sqrt_product, Matrix};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    GdScore,
    Conf,
    Entropy,
    Agree,
    Atc,
    Frechet,
    Dispersion,
    Nuclear,
    ProjNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherMeansHigherError,
    HigherMeansHigherAccuracy,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::GdScore,
        Method::Conf,
        Method::Entropy,
        Method::Agree,
        Method::Atc,
        Method::Frechet,
        Method::Dispersion,
        Method::Nuclear,
        Method::ProjNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GdScore => "gdscore",
            Method::Conf => "conf",
            Method::Entropy => "entropy",
            Method::Agree => "agree",
            Method::Atc => "atc",
            Method::Frechet => "frechet",
            Method::Dispersion => "dispersion",
            Method::Nuclear => "nuclear",
            Method::ProjNorm => "projnorm",
        }
    }

    pub fn direction(self) -> Direction {
        use Direction::*;
        match self {
            Method::GdScore | Method::Agree | Method::Atc | Method::Frechet | Method::ProjNorm => {
                HigherMeansHigherError
            }
            Method::Conf | Method::Entropy | Method::Dispersion | Method::Nuclear => {
                HigherMeansHigherAccuracy
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue {
    pub method: Method,
    pub value: f64,
    pub direction: Direction,
}

impl ScoreValue {
    fn new(method: Method, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("{method} produced non-finite value {value}")));
        }
        Ok(ScoreValue {
            method,
            value,
            direction: method.direction(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    EntropyLowConf,
    Smoothing,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::EntropyLowConf, LossKind::Smoothing];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::EntropyLowConf => "entropy_low_conf",
            LossKind::Smoothing => "smoothing",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss {s:?}")))
    }
}

/// Where the gradient for [`gdscore`] is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    /// One full-data gradient at the source weights.
    FullBatch,
    /// Average of mini-batch gradients collected over one epoch of SGD
    /// on the pseudo-labelled test set, weights updated between batches.
    EpochAccumulate {
        batch_size: usize,
        learning_rate: f64,
        momentum: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjNormConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for ProjNormConfig {
    fn default() -> Self {
        ProjNormConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Norm order of the gradient norm.
    pub p: f64,
    /// Confidence threshold for mixed labelling and the entropy loss split.
    pub tau: f64,
    pub labels: LabelKind,
    pub loss: LossKind,
    pub smoothing_rate: f64,
    pub seed: u64,
    pub gradient: GradientMode,
    pub projnorm: ProjNormConfig,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            p: 0.3,
            tau: 0.5,
            labels: LabelKind::Mixed,
            loss: LossKind::Ce,
            smoothing_rate: 0.4,
            seed: 0,
            gradient: GradientMode::FullBatch,
            projnorm: ProjNormConfig::default(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) {
            return Err(Error::InvalidParameter(format!("p must be > 0, got {}", self.p)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidParameter(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        self.loss_variant().validate()
    }

    pub fn label_strategy(&self) -> LabelStrategy {
        self.labels.with_tau(self.tau)
    }

    pub fn loss_variant(&self) -> LossVariant {
        match self.loss {
            LossKind::Ce => LossVariant::CrossEntropy,
            LossKind::EntropyLowConf => LossVariant::EntropyLowConfidence { tau: self.tau },
            LossKind::Smoothing => LossVariant::LabelSmoothing {
                rate: self.smoothing_rate,
            },
        }
    }
}

fn check_pair(clf: &LinearClassifier, test: &Dataset) -> Result<()> {
    if clf.dim() != test.dim() || clf.num_classes() != test.num_classes() {
        return Err(Error::InvalidInput(format!(
            "classifier {}x{} does not match dataset {:?} ({} features, {} classes)",
            clf.dim(),
            clf.num_classes(),
            test.name(),
            test.dim(),
            test.num_classes()
        )));
    }
    Ok(())
}

/// The last-layer gradient [`gdscore`] takes the norm of.
pub fn gdscore_gradient(clf: &LinearClassifier, test: &Dataset, cfg: &ScoreConfig) -> Result<Matrix> {
    cfg.validate()?;
    check_pair(clf, test)?;
    let targets = generate_labels(clf, test, cfg.label_strategy(), cfg.seed)?;
    let variant = cfg.loss_variant();
    match cfg.gradient {
        GradientMode::FullBatch => Ok(objective_and_grad(clf, test.features(), &targets, variant)?.1),
        GradientMode::EpochAccumulate {
            batch_size,
            learning_rate,
            momentum,
        } => epoch_accumulated_gradient(clf, test, &targets, variant, batch_size, learning_rate, momentum, cfg.seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn epoch_accumulated_gradient(
    clf: &LinearClassifier,
    test: &Dataset,
    targets: &Targets,
    variant: LossVariant,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
) -> Result<Matrix> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let m = test.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut StreamKey::new(seed).with_str("gd-epoch").with_str(test.name()).rng());
    let mut weights = clf.weights().clone();
    let mut velocity = Matrix::zeros(clf.dim(), clf.num_classes());
    let mut acc = Matrix::zeros(clf.dim(), clf.num_classes());
    for chunk in order.chunks(batch_size) {
        let mut idx = chunk.to_vec();
        idx.sort_unstable();
        let cur = LinearClassifier::new(weights.clone())?;
        let (_, g) = objective_and_grad(&cur, &test.features().select_rows(&idx), &targets.select(&idx), variant)?;
        acc = acc.axpy(idx.len() as f64 / m as f64, &g)?;
        velocity = g.axpy(momentum, &velocity)?;
        weights = weights.axpy(-learning_rate, &velocity)?;
    }
    Ok(acc)
}

/// Lp norm of the last-layer gradient of the loss on pseudo-labelled test
/// data, taken at the source weights.
pub fn gdscore(clf: &LinearClassifier, test: &Dataset, cfg: &ScoreConfig) -> Result<ScoreValue> {
    let g = gdscore_gradient(clf, test, cfg)?;
    ScoreValue::new(Method::GdScore, lp_norm(g.data(), cfg.p)?)
}

fn max_probs(clf: &LinearClassifier, test: &Dataset) -> Result<Vec<f64>> {
    check_pair(clf, test)?;
    Ok(clf
        .probabilities(test.features())?
        .iter_rows()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect())
}

/// Mean of the largest softmax probability.
pub fn conf_score(clf: &LinearClassifier, test: &Dataset) -> Result<ScoreValue> {
    let c = max_probs(clf, test)?;
    ScoreValue::new(Method::Conf, c.iter().sum::<f64>() / c.len() as f64)
}

/// `Σ_k s_k log s_k` per row (non-positive; 0 for one-hot outputs).
pub fn negative_entropies(clf: &LinearClassifier, test: &Dataset) -> Result<Vec<f64>> {
    check_pair(clf, test)?;
    Ok(clf
        .probabilities(test.features())?
        .iter_rows()
        .map(|r| r.iter().filter(|&&s| s > 0.0).map(|&s| s * s.ln()).sum())
        .collect())
}

/// Mean of `Σ_k s_k log s_k`, in `[−ln K, 0]`.
pub fn entropy_score(clf: &LinearClassifier, test: &Dataset) -> Result<ScoreValue> {
    let v = negative_entropies(clf, test)?;
    ScoreValue::new(Method::Entropy, v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of rows where two classifiers predict different classes.
pub fn agree_score(a: &LinearClassifier, b: &LinearClassifier, test: &Dataset) -> Result<ScoreValue> {
    check_pair(a, test)?;
    check_pair(b, test)?;
    let pa = a.predict(test.features())?;
    let pb = b.predict(test.features())?;
    let diff = pa.iter().zip(&pb).filter(|(x, y)| x != y).count();
    ScoreValue::new(Method::Agree, diff as f64 / test.len() as f64)
}

/// Threshold on the negative-entropy score learned from labelled source
/// validation data.
///
/// With validation error `e` over `m` rows and scores sorted ascending, the
/// threshold is the score at zero-based position `r = ⌈e·m⌉`, so exactly `r`
/// validation rows fall strictly below it when scores are distinct. An
/// error rate of 1 gives `+∞`.
pub fn atc_threshold(clf: &LinearClassifier, validation: &Dataset) -> Result<f64> {
    let y = validation.require_labels("atc_threshold")?;
    let pred = clf.predict(validation.features())?;
    let wrong = pred.iter().zip(y).filter(|(a, b)| a != b).count();
    let mut scores = negative_entropies(clf, validation)?;
    let m = scores.len();
    scores.sort_by(f64::total_cmp);
    // ⌈(wrong/m)·m⌉ == wrong, kept in integers to avoid rounding
    Ok(if wrong >= m { f64::INFINITY } else { scores[wrong] })
}

/// Fraction of test rows whose negative entropy is strictly below `t`.
pub fn atc_score(clf: &LinearClassifier, test: &Dataset, threshold: f64) -> Result<ScoreValue> {
    if threshold.is_nan() {
        return Err(Error::InvalidParameter("ATC threshold is NaN".into()));
    }
    let v = negative_entropies(clf, test)?;
    let below = v.iter().filter(|&&s| s < threshold).count();
    ScoreValue::new(Method::Atc, below as f64 / v.len() as f64)
}

/// Mean and covariance of a reference feature set, reused across test sets.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl FeatureStats {
    pub fn of(ds: &Dataset) -> Result<Self> {
        let (mean, cov) = mean_and_cov(ds.features())?;
        Ok(FeatureStats { mean, cov })
    }
}

/// `‖μ_s − μ_t‖₂ + Tr(Σ_s + Σ_t − 2(Σ_s Σ_t)^{1/2})`.
///
/// The mean term is the plain Euclidean distance, not its square.
pub fn frechet_from_stats(source: &FeatureStats, test: &FeatureStats) -> Result<ScoreValue> {
    if source.mean.len() != test.mean.len() {
        return Err(Error::InvalidInput("feature dimensions differ".into()));
    }
    let diff: Vec<f64> = source.mean.iter().zip(&test.mean).map(|(a, b)| a - b).collect();
    let mean_term = lp_norm(&diff, 2.0)?;
    let cross = trace_sqrt_product(&source.cov, &test.cov)?;
    let tr = source.cov.trace() + test.cov.trace() - 2.0 * cross;
    ScoreValue::new(Method::Frechet, mean_term + tr)
}

pub fn frechet_score(source: &Dataset, test: &Dataset) -> Result<ScoreValue> {
    frechet_from_stats(&FeatureStats::of(source)?, &FeatureStats::of(test)?)
}

/// `log(Σ_k m_k ‖μ̄ − μ̃_k‖² / (K − 1))` over argmax-predicted classes.
///
/// Classes nobody is assigned to are skipped. Fewer than two occupied
/// classes, or zero scatter, is [`Error::DegenerateDispersion`].
pub fn dispersion_score(clf: &LinearClassifier, test: &Dataset) -> Result<ScoreValue> {
    check_pair(clf, test)?;
    let pred = clf.predict(test.features())?;
    let (k, d, m) = (test.num_classes(), test.dim(), test.len());
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    let mut overall = vec![0.0; d];
    for (row, &c) in test.features().iter_rows().zip(&pred) {
        counts[c] += 1;
        for (j, &v) in row.iter().enumerate() {
            sums[(c, j)] += v;
            overall[j] += v;
        }
    }
    for v in &mut overall {
        *v /= m as f64;
    }
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::DegenerateDispersion);
    }
    let mut scatter = 0.0;
    for c in (0..k).filter(|&c| counts[c] > 0) {
        let n = counts[c] as f64;
        let dist2: f64 = (0..d).map(|j| (overall[j] - sums[(c, j)] / n).powi(2)).sum();
        scatter += n * dist2;
    }
    if !(scatter > 0.0) {
        return Err(Error::DegenerateDispersion);
    }
    ScoreValue::new(Method::Dispersion, (scatter / (k - 1) as f64).ln())
}

/// Sum of singular values of an m×K probability matrix.
pub fn nuclear_norm(probs: &Matrix) -> Result<f64> {
    Ok(svd_singular_values(probs)?.iter().sum())
}

/// Nuclear norm of the test softmax matrix divided by `√(m·min(m, K))`,
/// which puts it in `(0, 1]`.
pub fn nuclear_score(clf: &LinearClassifier, test: &Dataset) -> Result<ScoreValue> {
    check_pair(clf, test)?;
    let p = clf.probabilities(test.features())?;
    let (m, k) = p.shape();
    let norm = ((m * m.min(k)) as f64).sqrt();
    ScoreValue::new(Method::Nuclear, nuclear_norm(&p)? / norm)
}

/// L2 distance between the reference weights and weights fine-tuned on the
/// fully pseudo-labelled test set.
pub fn projnorm_score(clf_ref: &LinearClassifier, test: &Dataset, cfg: &ScoreConfig) -> Result<ScoreValue> {
    check_pair(clf_ref, test)?;
    let targets = generate_labels(clf_ref, test, LabelStrategy::FullPseudo, cfg.seed)?;
    let pc = cfg.projnorm;
    let train = TrainConfig {
        learning_rate: pc.learning_rate,
        epochs: pc.epochs,
        batch_size: pc.batch_size,
        momentum: pc.momentum,
        seed: StreamKey::new(cfg.seed).with_str("projnorm").with_str(test.name()).value(),
        grad_norm_p: 2.0,
    };
    let tuned = sgd_fit(clf_ref, test.features(), &targets, LossVariant::CrossEntropy, &train)?;
    let diff = tuned.classifier.weights().sub(clf_ref.weights())?;
    ScoreValue::new(Method::ProjNorm, diff.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::last_layer_grad;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_case(seed: u64, m: usize, d: usize, k: usize) -> (LinearClassifier, Dataset) {
        let mut rng = StreamKey::new(seed).rng();
        let x = Matrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
        let w = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        let y = (0..m).map(|_| rng.random_range(0..k)).collect();
        (
            LinearClassifier::new(w).unwrap(),
            Dataset::new("case", x, Some(y), k).unwrap(),
        )
    }

    fn permuted(ds: &Dataset, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut StreamKey::new(seed).rng());
        ds.select(&idx).unwrap()
    }

    #[test]
    fn gdscore_zero_on_saturated_pseudo_labels() {
        let w = Matrix::from_rows(&[[900.0, -900.0, -900.0], [-900.0, 900.0, -900.0]]).unwrap();
        let clf = LinearClassifier::new(w).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 0.1]]).unwrap();
        let test = Dataset::new("sat", x, None, 3).unwrap();
        let cfg = ScoreConfig { labels: LabelKind::Pseudo, ..ScoreConfig::default() };
        assert_eq!(gdscore(&clf, &test, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn gdscore_matches_finite_difference_norm() {
        for seed in 0..20 {
            let (clf, ds) = random_case(seed, 25, 6, 3);
            let test = ds.without_labels();
            let cfg = ScoreConfig::default();
            let score = gdscore(&clf, &test, &cfg).unwrap().value;
            let targets = generate_labels(&clf, &test, cfg.label_strategy(), cfg.seed).unwrap();
            let loss = |w: &Matrix| {
                crate::model::objective(&LinearClassifier::new(w.clone()).unwrap(), test.features(), &targets, LossVariant::CrossEntropy).unwrap()
            };
            let h = 1e-6;
            let mut fd = Matrix::zeros(6, 3);
            for i in 0..6 {
                for j in 0..3 {
                    let mut a = clf.weights().clone();
                    a[(i, j)] += h;
                    let mut b = clf.weights().clone();
                    b[(i, j)] -= h;
                    fd[(i, j)] = (loss(&a) - loss(&b)) / (2.0 * h);
                }
            }
            let want = lp_norm(fd.data(), 0.3).unwrap();
            assert!((score - want).abs() <= 1e-5 * want, "{score} vs {want}");
        }
    }

    #[test]
    fn gdscore_duplicate_and_permutation_invariant() {
        let (clf, ds) = random_case(3, 40, 5, 4);
        let test = ds.without_labels();
        let cfg = ScoreConfig { labels: LabelKind::Pseudo, ..ScoreConfig::default() };
        let base = gdscore(&clf, &test, &cfg).unwrap().value;
        let idx: Vec<usize> = (0..40).chain(0..40).collect();
        let dup = gdscore(&clf, &test.select(&idx).unwrap(), &cfg).unwrap().value;
        assert!((base - dup).abs() <= 1e-12 * base);
        let perm = gdscore(&clf, &permuted(&test, 1), &cfg).unwrap().value;
        assert!((base - perm).abs() <= 1e-12 * base);
    }

    #[test]
    fn gdscore_truth_respects_gradient_bound() {
        for seed in 0..50 {
            let (clf, ds) = random_case(seed + 100, 30, 4, 3);
            let cfg = ScoreConfig { labels: LabelKind::Truth, p: 2.0, ..ScoreConfig::default() };
            let score = gdscore(&clf, &ds, &cfg).unwrap().value;
            let p = clf.probabilities(ds.features()).unwrap();
            let y = ds.labels().unwrap();
            let bound: f64 = ds
                .features()
                .iter_rows()
                .enumerate()
                .map(|(i, x)| (1.0 - p[(i, y[i])]) * lp_norm(x, 2.0).unwrap())
                .sum::<f64>()
                / ds.len() as f64;
            assert!(score <= 2f64.sqrt() * bound + 1e-9);
        }
    }

    #[test]
    fn gdscore_variants_run() {
        let (clf, ds) = random_case(9, 60, 5, 3);
        let test = ds.without_labels();
        for loss in LossKind::ALL {
            for labels in [LabelKind::Mixed, LabelKind::Pseudo, LabelKind::Random, LabelKind::Uniform] {
                let cfg = ScoreConfig { loss, labels, ..ScoreConfig::default() };
                let v = gdscore(&clf, &test, &cfg).unwrap();
                assert!(v.value >= 0.0 && v.value.is_finite());
            }
        }
        let cfg = ScoreConfig {
            gradient: GradientMode::EpochAccumulate { batch_size: 8, learning_rate: 0.0, momentum: 0.0 },
            ..ScoreConfig::default()
        };
        // zero learning rate: accumulated batch gradients average to the full one
        let acc = gdscore(&clf, &test, &cfg).unwrap().value;
        let full = gdscore(&clf, &test, &ScoreConfig::default()).unwrap().value;
        assert!((acc - full).abs() <= 1e-10 * full);
        assert!(gdscore(&clf, &test, &ScoreConfig { labels: LabelKind::Truth, ..ScoreConfig::default() }).is_err());
    }

    #[test]
    fn conf_and_entropy_examples() {
        let k = 3;
        let sat = LinearClassifier::new(Matrix::from_rows(&[[900.0, -900.0, -900.0]]).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let t = Dataset::new("t", x, None, k).unwrap();
        assert_eq!(conf_score(&sat, &t).unwrap().value, 1.0);
        assert_eq!(entropy_score(&sat, &t).unwrap().value, 0.0);

        let flat = LinearClassifier::zeros(1, k).unwrap();
        assert!((conf_score(&flat, &t).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        assert!((entropy_score(&flat, &t).unwrap().value + 3f64.ln()).abs() < 1e-15);

        // rows with max prob 0.9 and 0.5 (K = 2): logits ln 9 and 0
        let clf = LinearClassifier::new(Matrix::from_rows(&[[9f64.ln(), 0.0]]).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let t2 = Dataset::new("t2", x, None, 2).unwrap();
        assert!((conf_score(&clf, &t2).unwrap().value - 0.7).abs() < 1e-15);

        // (0.5, 0.5) and (1, 0): mean of −ln 2 and 0
        let clf = LinearClassifier::new(Matrix::from_rows(&[[900.0, -900.0]]).unwrap()).unwrap();
        let v = entropy_score(&clf, &t2).unwrap().value;
        assert!((v + 2f64.ln() / 2.0).abs() < 1e-15);
        assert_eq!(Method::Entropy.direction(), Direction::HigherMeansHigherAccuracy);
    }

    #[test]
    fn agree_examples() {
        let (clf, ds) = random_case(4, 20, 3, 2);
        assert_eq!(agree_score(&clf, &clf, &ds).unwrap().value, 0.0);
        let w = clf.weights();
        let swapped = Matrix::from_fn(3, 2, |i, j| w[(i, 1 - j)]);
        let sw = LinearClassifier::new(swapped).unwrap();
        // exact logit ties would make both pick class 0; random weights avoid them
        assert_eq!(agree_score(&clf, &sw, &ds).unwrap().value, 1.0);

        let a = LinearClassifier::new(Matrix::identity(2)).unwrap();
        let b = LinearClassifier::new(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 1.0]]).unwrap();
        let t = Dataset::new("t", x, None, 2).unwrap();
        assert_eq!(agree_score(&a, &b, &t).unwrap().value, 0.25);
    }

    #[test]
    fn atc_examples() {
        // perfectly accurate validation
        let clf = LinearClassifier::new(Matrix::from_rows(&[[2.0, -2.0], [-2.0, 2.0]]).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.5], [0.5, 0.0], [0.0, 3.0]]).unwrap();
        let val = Dataset::new("v", x, Some(vec![0, 1, 0, 1]), 2).unwrap();
        let t = atc_threshold(&clf, &val).unwrap();
        let ne = negative_entropies(&clf, &val).unwrap();
        assert_eq!(t, ne.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(atc_score(&clf, &val, t).unwrap().value, 0.0);

        // half wrong: threshold is the upper median
        let val2 = Dataset::new("v", val.features().clone(), Some(vec![1, 1, 1, 1]), 2).unwrap();
        let t = atc_threshold(&clf, &val2).unwrap();
        let mut sorted = ne.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(t, sorted[2]);
        assert_eq!(atc_score(&clf, &val2, t).unwrap().value, 0.5);

        let all_wrong = Dataset::new("v", val.features().clone(), Some(vec![1, 0, 1, 0]), 2).unwrap();
        assert_eq!(atc_threshold(&clf, &all_wrong).unwrap(), f64::INFINITY);

        let shuffled = permuted(&val2, 3);
        assert_eq!(atc_threshold(&clf, &shuffled).unwrap(), atc_threshold(&clf, &val2).unwrap());
        assert!(atc_threshold(&clf, &val.without_labels()).is_err());
    }

    #[test]
    fn atc_score_extremes() {
        let (clf, ds) = random_case(5, 10, 3, 3);
        assert_eq!(atc_score(&clf, &ds, f64::NEG_INFINITY).unwrap().value, 0.0);
        assert_eq!(atc_score(&clf, &ds, f64::INFINITY).unwrap().value, 1.0);
        let mut ne = negative_entropies(&clf, &ds).unwrap();
        ne.sort_by(f64::total_cmp);
        assert_eq!(atc_score(&clf, &ds, ne[3]).unwrap().value, 0.3);
    }

    #[test]
    fn frechet_examples() {
        let (_, a) = random_case(6, 50, 4, 2);
        let (_, b) = random_case(7, 60, 4, 2);
        assert!(frechet_score(&a, &a).unwrap().value.abs() < 1e-9);
        let ab = frechet_score(&a, &b).unwrap().value;
        let ba = frechet_score(&b, &a).unwrap().value;
        assert!((ab - ba).abs() < 1e-9 * ab.abs().max(1.0));

        // 1-D: mean 0 var 4 vs mean 3 var 1  →  3 + (4 + 1 − 2·2) = 4
        let s = Dataset::new("s", Matrix::from_rows(&[[-2.0], [2.0]]).unwrap(), None, 2).unwrap();
        let t = Dataset::new("t", Matrix::from_rows(&[[2.0], [4.0]]).unwrap(), None, 2).unwrap();
        assert!((frechet_score(&s, &t).unwrap().value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dispersion_examples() {
        let clf = LinearClassifier::new(Matrix::from_rows(&[[1.0, -1.0]]).unwrap()).unwrap();
        let mut rows = vec![[1.0]; 5];
        rows.extend([[-1.0]; 5]);
        let t = Dataset::new("t", Matrix::from_rows(&rows).unwrap(), None, 2).unwrap();
        assert!((dispersion_score(&clf, &t).unwrap().value - 10f64.ln()).abs() < 1e-14);

        let same = Dataset::new("s", Matrix::from_rows(&[[2.0]; 6]).unwrap(), None, 2).unwrap();
        assert!(matches!(dispersion_score(&clf, &same), Err(Error::DegenerateDispersion)));

        // translation invariance for a fixed class assignment
        let (clf, ds) = random_case(8, 40, 3, 3);
        let base = dispersion_score(&clf, &ds).unwrap().value;
        let pred = clf.predict(ds.features()).unwrap();
        assert!((dispersion_from_assignment(ds.features(), &pred, 3).unwrap() - base).abs() < 1e-12);
        let shifted = Matrix::from_fn(40, 3, |i, j| ds.features()[(i, j)] + [5.0, -2.0, 0.5][j]);
        let v = dispersion_from_assignment(&shifted, &pred, 3).unwrap();
        assert!((v - base).abs() < 1e-10);
    }

    /// Same formula as [`dispersion_score`] with the class assignment given.
    fn dispersion_from_assignment(x: &Matrix, pred: &[usize], k: usize) -> Result<f64> {
        let d = x.cols();
        let m = x.rows() as f64;
        let overall: Vec<f64> = (0..d).map(|j| x.column(j).iter().sum::<f64>() / m).collect();
        let mut scatter = 0.0;
        for c in 0..k {
            let rows: Vec<usize> = (0..x.rows()).filter(|&i| pred[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let dist2: f64 = (0..d)
                .map(|j| (overall[j] - rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n).powi(2))
                .sum();
            scatter += n * dist2;
        }
        Ok((scatter / (k - 1) as f64).ln())
    }

    #[test]
    fn nuclear_examples() {
        assert!((nuclear_norm(&Matrix::identity(4)).unwrap() - 4.0).abs() < 1e-12);

        // balanced one-hot rows: normalised value 1
        let k = 4;
        let m = 20;
        let w = Matrix::from_fn(k, k, |i, j| if i == j { 900.0 } else { -900.0 });
        let clf = LinearClassifier::new(w).unwrap();
        let x = Matrix::from_fn(m, k, |i, j| if i % k == j { 1.0 } else { 0.0 });
        let t = Dataset::new("t", x, None, k).unwrap();
        assert!((nuclear_score(&clf, &t).unwrap().value - 1.0).abs() < 1e-10);

        // uniform rows: rank one, σ = √(m/K), normalised (√(m/K))/√(mK) = 1/K
        let flat = LinearClassifier::zeros(k, k).unwrap();
        let sv = svd_singular_values(&flat.probabilities(t.features()).unwrap()).unwrap();
        assert!((sv[0] - (m as f64 / k as f64).sqrt()).abs() < 1e-10);
        assert!((nuclear_score(&flat, &t).unwrap().value - 1.0 / k as f64).abs() < 1e-10);
    }

    #[test]
    fn projnorm_examples() {
        let (clf, ds) = random_case(10, 30, 4, 3);
        let test = ds.without_labels();
        let zero_epochs = ScoreConfig {
            projnorm: ProjNormConfig { epochs: 0, ..ProjNormConfig::default() },
            ..ScoreConfig::default()
        };
        assert_eq!(projnorm_score(&clf, &test, &zero_epochs).unwrap().value, 0.0);
        let zero_lr = ScoreConfig {
            projnorm: ProjNormConfig { learning_rate: 0.0, ..ProjNormConfig::default() },
            ..ScoreConfig::default()
        };
        assert_eq!(projnorm_score(&clf, &test, &zero_lr).unwrap().value, 0.0);

        let eta = 0.05;
        let one_step = ScoreConfig {
            projnorm: ProjNormConfig { learning_rate: eta, epochs: 1, batch_size: 30, momentum: 0.0 },
            ..ScoreConfig::default()
        };
        let v = projnorm_score(&clf, &test, &one_step).unwrap().value;
        let pseudo = test.with_labels(clf.predict(test.features()).unwrap()).unwrap();
        let g = last_layer_grad(&clf, &pseudo).unwrap();
        assert!((v - eta * g.frobenius_norm()).abs() <= 1e-10);
    }

    #[test]
    fn scores_are_permutation_invariant() {
        let (clf, ds) = random_case(11, 50, 4, 3);
        let (clf_b, _) = random_case(12, 5, 4, 3);
        let (_, src) = random_case(13, 80, 4, 3);
        let test = ds.without_labels();
        let perm = permuted(&test, 2);
        let cfg = ScoreConfig { labels: LabelKind::Pseudo, ..ScoreConfig::default() };
        let pairs = [
            (gdscore(&clf, &test, &cfg).unwrap().value, gdscore(&clf, &perm, &cfg).unwrap().value),
            (conf_score(&clf, &test).unwrap().value, conf_score(&clf, &perm).unwrap().value),
            (entropy_score(&clf, &test).unwrap().value, entropy_score(&clf, &perm).unwrap().value),
            (agree_score(&clf, &clf_b, &test).unwrap().value, agree_score(&clf, &clf_b, &perm).unwrap().value),
            (atc_score(&clf, &test, -0.5).unwrap().value, atc_score(&clf, &perm, -0.5).unwrap().value),
            (frechet_score(&src, &test).unwrap().value, frechet_score(&src, &perm).unwrap().value),
            (dispersion_score(&clf, &test).unwrap().value, dispersion_score(&clf, &perm).unwrap().value),
            (nuclear_score(&clf, &test).unwrap().value, nuclear_score(&clf, &perm).unwrap().value),
        ];
        for (i, (a, b)) in pairs.iter().enumerate() {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "score {i}: {a} vs {b}");
        }
    }

    #[test]
    fn ranges_hold() {
        for seed in 0..20 {
            let (clf, ds) = random_case(seed + 200, 30, 3, 4);
            let c = conf_score(&clf, &ds).unwrap().value;
            assert!((0.0..=1.0).contains(&c));
            let e = entropy_score(&clf, &ds).unwrap().value;
            assert!(e <= 0.0 && e >= -(4f64.ln()) - 1e-12);
            let a = atc_score(&clf, &ds, -0.3).unwrap().value;
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
