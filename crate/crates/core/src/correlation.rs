//! Score–accuracy agreement metrics and calibration error.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::LinearClassifier;

/// Numerical noise tolerated outside `[0, 1]` before R² is clamped.
pub const R2_CLAMP_SLACK: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub name: String,
    /// `None` when the method could not produce a value for this dataset.
    pub score: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// One method's scores across a suite, with the fitted agreement metrics.
///
/// `spearman` keeps its sign; summaries print its absolute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub method: String,
    pub per_dataset: Vec<ScorePair>,
    pub r2: f64,
    pub spearman: f64,
    pub fit: LinearFit,
}

/// Minimum number of scored datasets before a report is fitted.
pub const MIN_REPORT_PAIRS: usize = 3;

impl ScoreReport {
    /// Fit accuracy on score over the pairs that carry a score.
    pub fn from_pairs(method: impl Into<String>, per_dataset: Vec<ScorePair>) -> Result<Self> {
        let pts: Vec<(f64, f64)> = per_dataset
            .iter()
            .filter_map(|p| p.score.map(|s| (s, p.accuracy)))
            .collect();
        if pts.len() < MIN_REPORT_PAIRS {
            return Err(Error::InsufficientData(format!(
                "need at least {MIN_REPORT_PAIRS} scored datasets, got {}",
                pts.len()
            )));
        }
        let (slope, intercept) = linear_fit(&pts)?;
        Ok(ScoreReport {
            method: method.into(),
            per_dataset,
            r2: r2(&pts)?,
            spearman: spearman(&pts)?,
            fit: LinearFit { slope, intercept },
        })
    }

    pub fn scored_pairs(&self) -> Vec<(f64, f64)> {
        self.per_dataset
            .iter()
            .filter_map(|p| p.score.map(|s| (s, p.accuracy)))
            .collect()
    }

    pub(crate) fn check_emittable(&self) -> Result<()> {
        if self.per_dataset.is_empty() {
            return Err(Error::ReportEmpty);
        }
        let finite = self.r2.is_finite()
            && self.spearman.is_finite()
            && self.fit.slope.is_finite()
            && self.fit.intercept.is_finite()
            && self
                .per_dataset
                .iter()
                .all(|p| p.accuracy.is_finite() && p.score.is_none_or(f64::is_finite));
        if !finite {
            return Err(Error::InvalidInput(format!(
                "report for {} contains non-finite values",
                self.method
            )));
        }
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count();
    v.sum::<f64>() / n as f64
}

/// Ordinary least squares of accuracy (second coordinate) on score (first).
pub fn linear_fit(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData("linear fit needs at least 2 pairs".into()));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite pair in linear fit".into()));
    }
    let mx = mean(pairs.iter().map(|p| p.0));
    let my = mean(pairs.iter().map(|p| p.1));
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all scores are identical".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Coefficient of determination of the OLS fit, clamped to `[0, 1]`.
pub fn r2(pairs: &[(f64, f64)]) -> Result<f64> {
    let (slope, intercept) = linear_fit(pairs)?;
    let my = mean(pairs.iter().map(|p| p.1));
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateFit("accuracy has zero variance".into()));
    }
    let ss_res: f64 = pairs
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let v = 1.0 - ss_res / ss_tot;
    debug_assert!(v > -R2_CLAMP_SLACK && v < 1.0 + R2_CLAMP_SLACK, "r2 {v}");
    Ok(v.clamp(0.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let mx = mean(x.iter().copied());
    let my = mean(y.iter().copied());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateFit("constant ranks in correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData("spearman needs at least 2 pairs".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    pearson(&average_ranks(&xs), &average_ranks(&ys))
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// Bin `b` holds confidences in `(b/B, (b+1)/B]`, with zero placed in the
/// first bin.
pub fn ece_from_outputs(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidParameter("ece needs at least one bin".into()));
    }
    if confidence.len() != correct.len() || confidence.is_empty() {
        return Err(Error::InvalidInput(format!(
            "ece: {} confidences vs {} outcomes",
            confidence.len(),
            correct.len()
        )));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let m = confidence.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / m) * (hit_sum[b] / n - conf_sum[b] / n).abs()
        })
        .sum())
}

/// ECE of a classifier's max-softmax confidence on a labelled dataset.
pub fn ece(clf: &LinearClassifier, ds: &Dataset, bins: usize) -> Result<f64> {
    let y = ds.require_labels("ece")?;
    let probs = clf.probabilities(ds.features())?;
    let pred = clf.predict(ds.features())?;
    let conf: Vec<f64> = probs
        .iter_rows()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();
    let correct: Vec<bool> = pred.iter().zip(y).map(|(a, b)| a == b).collect();
    ece_from_outputs(&conf, &correct, bins)
}
