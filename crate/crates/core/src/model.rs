//! Linear softmax classifier over fixed features.
//!
//! Logits are `X·ω` with `ω` a D×K weight matrix and no bias column; append
//! a constant feature if an intercept is wanted.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numkit::{lp_norm, softmax_rows, Matrix};
use crate::rng::StreamKey;

/// Probabilities are clamped to at least this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: Matrix,
}

impl LinearClassifier {
    pub fn new(weights: Matrix) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::InvalidInput("classifier weights must be finite".into()));
        }
        if weights.rows() == 0 || weights.cols() < 2 {
            return Err(Error::InvalidInput(format!(
                "classifier needs D >= 1 and K >= 2, got {:?}",
                weights.shape()
            )));
        }
        Ok(LinearClassifier { weights })
    }

    pub fn zeros(dim: usize, num_classes: usize) -> Result<Self> {
        LinearClassifier::new(Matrix::zeros(dim, num_classes))
    }

    /// Gaussian initialisation `N(0, scale²)` from a keyed stream.
    pub fn random_init(dim: usize, num_classes: usize, scale: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::InvalidParameter(format!("init scale {scale}: {e}")))?;
        let mut rng = StreamKey::new(seed).with_str("init").rng();
        let w = Matrix::from_fn(dim, num_classes, |_, _| normal.sample(&mut rng));
        LinearClassifier::new(w)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn into_weights(self) -> Matrix {
        self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    fn check_features(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "features have {} columns but classifier expects {}",
                x.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        self.check_features(ds.features())?;
        if ds.num_classes() != self.num_classes() {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} has {} classes but classifier has {}",
                ds.name(),
                ds.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Logits `X·ω` (m×K).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_features(x)?;
        x.matmul(&self.weights)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        softmax_rows(&self.forward(x)?)
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.iter_rows().map(argmax).collect())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - lse).max(log_floor());
    }
}

/// Training targets: class indices or per-row probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    /// m×K, rows summing to one.
    Soft(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(v) => v.len(),
            Targets::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hard(&self) -> Option<&[usize]> {
        match self {
            Targets::Hard(v) => Some(v),
            Targets::Soft(_) => None,
        }
    }

    fn check(&self, m: usize, k: usize) -> Result<()> {
        if self.len() != m {
            return Err(Error::InvalidInput(format!(
                "{} targets for {m} rows",
                self.len()
            )));
        }
        match self {
            Targets::Hard(v) => {
                if let Some(&y) = v.iter().find(|&&y| y >= k) {
                    return Err(Error::InvalidInput(format!("target {y} out of range for {k} classes")));
                }
            }
            Targets::Soft(t) => {
                if t.cols() != k || !t.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "soft targets must be finite {m}x{k}, got {:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target distribution for row `i`, written into `out`.
    fn fill_row(&self, i: usize, out: &mut [f64]) {
        match self {
            Targets::Hard(v) => {
                out.fill(0.0);
                out[v[i]] = 1.0;
            }
            Targets::Soft(t) => out.copy_from_slice(t.row(i)),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Hard(v) => Targets::Hard(idx.iter().map(|&i| v[i]).collect()),
            Targets::Soft(t) => Targets::Soft(t.select_rows(idx)),
        }
    }
}

/// Training objective applied to the softmax outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossVariant {
    CrossEntropy,
    /// Cross-entropy on rows whose max probability exceeds `tau`, plus the
    /// mean prediction entropy on the remaining rows. Each part is averaged
    /// over its own row count.
    EntropyLowConfidence { tau: f64 },
    /// Cross-entropy against `(1 - rate)·y + rate/K`.
    LabelSmoothing { rate: f64 },
}

impl LossVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossVariant::CrossEntropy => Ok(()),
            LossVariant::EntropyLowConfidence { tau } if (0.0..=1.0).contains(&tau) => Ok(()),
            LossVariant::LabelSmoothing { rate } if (0.0..1.0).contains(&rate) => Ok(()),
            v => Err(Error::InvalidParameter(format!("loss variant out of range: {v:?}"))),
        }
    }
}

/// Loss value and its gradient with respect to the weights for any target
/// kind and loss variant.
///
/// For the cross-entropy family the gradient is `Xᵀ(S − T)/m`; the entropy
/// rows contribute `Xᵀ·G` with `G_ij = −s_ij(log s_ij + H_i)`.
pub fn objective_and_grad(
    clf: &LinearClassifier,
    x: &Matrix,
    targets: &Targets,
    variant: LossVariant,
) -> Result<(f64, Matrix)> {
    variant.validate()?;
    let m = x.rows();
    let k = clf.num_classes();
    if m == 0 {
        return Err(Error::InvalidInput("loss over zero rows".into()));
    }
    targets.check(m, k)?;
    let logits = clf.forward(x)?;
    let probs = softmax_rows(&logits)?;

    // per-row (weight, is_entropy_row)
    let (n_ce, n_ent, split): (usize, usize, Vec<bool>) = match variant {
        LossVariant::EntropyLowConfidence { tau } => {
            let low: Vec<bool> = probs
                .iter_rows()
                .map(|p| p.iter().copied().fold(0.0, f64::max) <= tau)
                .collect();
            let n_low = low.iter().filter(|&&b| b).count();
            (m - n_low, n_low, low)
        }
        _ => (m, 0, vec![false; m]),
    };
    let smoothing = match variant {
        LossVariant::LabelSmoothing { rate } => rate,
        _ => 0.0,
    };

    let mut loss_ce = 0.0;
    let mut loss_ent = 0.0;
    let mut dlogits = Matrix::zeros(m, k);
    let mut logp = vec![0.0; k];
    let mut t = vec![0.0; k];
    for (i, &low_conf) in split.iter().enumerate() {
        log_softmax_row(logits.row(i), &mut logp);
        let s = probs.row(i);
        if low_conf {
            let h: f64 = -s.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            loss_ent += h;
            let scale = 1.0 / n_ent as f64;
            for ((g, &p), &l) in dlogits.row_mut(i).iter_mut().zip(s).zip(&logp) {
                *g = -p * (l + h) * scale;
            }
        } else {
            targets.fill_row(i, &mut t);
            if smoothing > 0.0 {
                for v in t.iter_mut() {
                    *v = (1.0 - smoothing) * *v + smoothing / k as f64;
                }
            }
            loss_ce -= t.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
            let scale = 1.0 / n_ce as f64;
            for ((g, &p), &y) in dlogits.row_mut(i).iter_mut().zip(s).zip(&t) {
                *g = (p - y) * scale;
            }
        }
    }
    let mut loss = 0.0;
    if n_ce > 0 {
        loss += loss_ce / n_ce as f64;
    }
    if n_ent > 0 {
        loss += loss_ent / n_ent as f64;
    }
    let grad = x.transpose().matmul(&dlogits)?;
    Ok((loss, grad))
}

pub fn objective(
    clf: &LinearClassifier,
    x: &Matrix,
    targets: &Targets,
    variant: LossVariant,
) -> Result<f64> {
    objective_and_grad(clf, x, targets, variant).map(|(l, _)| l)
}

/// Mean cross-entropy (or variant) of a labelled dataset.
pub fn ce_loss(clf: &LinearClassifier, ds: &Dataset, variant: LossVariant) -> Result<f64> {
    clf.check_dataset(ds)?;
    let y = ds.require_labels("ce_loss")?;
    objective(clf, ds.features(), &Targets::Hard(y.to_vec()), variant)
}

/// Gradient of the mean cross-entropy with respect to the weights,
/// `−(1/m) Σᵢ xᵢ (yᵢ − s(xᵢ))ᵀ`.
pub fn last_layer_grad(clf: &LinearClassifier, ds: &Dataset) -> Result<Matrix> {
    clf.check_dataset(ds)?;
    let y = ds.require_labels("last_layer_grad")?;
    objective_and_grad(clf, ds.features(), &Targets::Hard(y.to_vec()), LossVariant::CrossEntropy)
        .map(|(_, g)| g)
}

/// The target-column expression `(−(1/m) Σᵢ yᵢ^(k) xᵢ (1 − s^(k)(xᵢ)))_k`.
///
/// This keeps only the derivative through the true-class probability, so it
/// agrees with [`last_layer_grad`] on the true-class columns of each row and
/// drops the `+s^(k) x` terms of the other columns. Its per-row Lp norm is
/// exactly `(1 − s^(k_y))·‖x‖_p`.
pub fn target_column_grad(clf: &LinearClassifier, ds: &Dataset) -> Result<Matrix> {
    clf.check_dataset(ds)?;
    let y = ds.require_labels("target_column_grad")?;
    let probs = clf.probabilities(ds.features())?;
    let m = ds.len();
    let mut g = Matrix::zeros(clf.dim(), clf.num_classes());
    for (i, row) in ds.features().iter_rows().enumerate() {
        let alpha = 1.0 - probs[(i, y[i])];
        for (d, &xd) in row.iter().enumerate() {
            g[(d, y[i])] -= xd * alpha / m as f64;
        }
    }
    Ok(g)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(clf: &LinearClassifier, ds: &Dataset) -> Result<f64> {
    clf.check_dataset(ds)?;
    let y = ds.require_labels("accuracy")?;
    let pred = clf.predict(ds.features())?;
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Norm order used for the per-epoch gradient log.
    #[serde(default = "default_grad_norm_p")]
    pub grad_norm_p: f64,
}

fn default_grad_norm_p() -> f64 {
    0.3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
            grad_norm_p: default_grad_norm_p(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.grad_norm_p > 0.0) {
            return Err(Error::InvalidParameter("grad_norm_p must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: LinearClassifier,
    /// Norm of the full-data gradient at the start of each epoch; entry 0 is
    /// taken at the initial weights.
    pub epoch_grad_norms: Vec<f64>,
    pub final_loss: f64,
}

/// Mini-batch SGD with heavy-ball momentum (`v ← μv + g`, `ω ← ω − ηv`).
///
/// Batches come from a per-epoch shuffle keyed by `cfg.seed`; a batch that
/// covers every row is processed in row order, so one full-batch epoch
/// with zero momentum is exactly `ω − η·∇L(ω)`.
pub fn sgd_fit(
    init: &LinearClassifier,
    x: &Matrix,
    targets: &Targets,
    variant: LossVariant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = x.rows();
    targets.check(m, init.num_classes())?;
    let mut clf = init.clone();
    let mut velocity = Matrix::zeros(clf.dim(), clf.num_classes());
    let mut norms = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..m).collect();

    for epoch in 0..cfg.epochs {
        let (loss, full) = objective_and_grad(&clf, x, targets, variant)?;
        if !loss.is_finite() || !full.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        norms.push(lp_norm(full.data(), cfg.grad_norm_p)?);

        if cfg.batch_size < m {
            order.sort_unstable();
            order.shuffle(&mut StreamKey::new(cfg.seed).with_str("shuffle").with_u64(epoch as u64).rng());
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let grad = if idx.len() == m {
                objective_and_grad(&clf, x, targets, variant)?.1
            } else {
                objective_and_grad(&clf, &x.select_rows(&idx), &targets.select(&idx), variant)?.1
            };
            velocity = grad.axpy(cfg.momentum, &velocity)?;
            let w = clf.weights.axpy(-cfg.learning_rate, &velocity)?;
            if !w.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            clf.weights = w;
        }
    }
    let final_loss = objective(&clf, x, targets, variant)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: cfg.epochs });
    }
    Ok(TrainOutcome {
        classifier: clf,
        epoch_grad_norms: norms,
        final_loss,
    })
}

/// [`sgd_fit`] on the dataset's own labels with plain cross-entropy.
pub fn sgd_train(init: &LinearClassifier, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    init.check_dataset(ds)?;
    let y = ds.require_labels("sgd_train")?;
    sgd_fit(init, ds.features(), &Targets::Hard(y.to_vec()), LossVariant::CrossEntropy, cfg)
}
