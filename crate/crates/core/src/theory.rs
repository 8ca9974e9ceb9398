//! Numerical checks of the gradient-norm bounds on empirical distributions.
//!
//! Each check evaluates both sides of an inequality with the implemented
//! loss and gradient and reports whether `lhs ≤ rhs + SLACK`. The empirical
//! distribution of a [`Dataset`] plays the role of the target distribution.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{ce_loss, last_layer_grad, target_column_grad, LinearClassifier, LossVariant};
use crate::numkit::{conjugate_exponent, lp_norm, Matrix};
use crate::rng::{StreamKey, StreamRng};

pub const SLACK: f64 = 1e-9;

/// Hölder pairs used for the risk-difference bounds.
pub const HOLDER_PAIRS: [(f64, f64); 3] = [(1.0, f64::INFINITY), (2.0, 2.0), (f64::INFINITY, 1.0)];

pub const DEFAULT_ETAS: [f64; 7] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0];

pub const THM2_NORMS: [f64; 3] = [1.0, 2.0, 3.0];

fn norm_label(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

fn risk(clf: &LinearClassifier, ds: &Dataset) -> Result<f64> {
    ce_loss(clf, ds, LossVariant::CrossEntropy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            lhs,
            rhs,
            holds: lhs <= rhs + SLACK,
        }
    }
}

fn check_pq(p: f64, q: f64) -> Result<()> {
    let want = conjugate_exponent(p)?;
    let ok = if want.is_infinite() || q.is_infinite() {
        want == q
    } else {
        (1.0 / p + 1.0 / q - 1.0).abs() <= 1e-12
    };
    if !ok {
        return Err(Error::InvalidParameter(format!("{p} and {q} are not conjugate exponents")));
    }
    Ok(())
}

/// `|L(c′) − L(c)| ≤ max(‖∇L(c)‖_p, ‖∇L(c′)‖_p)·‖c′ − c‖_q`.
pub fn check_thm1(c: &LinearClassifier, c2: &LinearClassifier, ds: &Dataset, p: f64, q: f64) -> Result<BoundCheck> {
    check_pq(p, q)?;
    let lhs = (risk(c2, ds)? - risk(c, ds)?).abs();
    let g1 = lp_norm(last_layer_grad(c, ds)?.data(), p)?;
    let g2 = lp_norm(last_layer_grad(c2, ds)?.data(), p)?;
    let step = c2.weights().sub(c.weights())?;
    Ok(BoundCheck::new(lhs, g1.max(g2) * lp_norm(step.data(), q)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cor1Row {
    pub eta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// One gradient step `c = ω_s − η∇L(ω_s)` per `η`, checking
/// `|L(ω_s) − L(c)| ≤ η·max(‖∇L(ω_s)‖_p, ‖∇L(c)‖_p)·‖∇L(ω_s)‖_q`.
pub fn check_cor1(ws: &LinearClassifier, etas: &[f64], ds: &Dataset, p: f64, q: f64) -> Result<Vec<Cor1Row>> {
    check_pq(p, q)?;
    let g = last_layer_grad(ws, ds)?;
    let base = risk(ws, ds)?;
    let gp = lp_norm(g.data(), p)?;
    let gq = lp_norm(g.data(), q)?;
    etas.iter()
        .map(|&eta| {
            if !(eta >= 0.0) {
                return Err(Error::InvalidParameter(format!("step size must be >= 0, got {eta}")));
            }
            let c = LinearClassifier::new(ws.weights().axpy(-eta, &g)?)?;
            let lhs = (base - risk(&c, ds)?).abs();
            let gc = lp_norm(last_layer_grad(&c, ds)?.data(), p)?;
            let b = BoundCheck::new(lhs, eta * gp.max(gc) * gq);
            Ok(Cor1Row {
                eta,
                lhs: b.lhs,
                rhs: b.rhs,
                holds: b.holds,
            })
        })
        .collect()
}

/// `‖∇L(ω_s)‖₂²`, the limit of `lhs/η` in [`check_cor1`] as `η → 0`.
pub fn cor1_limit(ws: &LinearClassifier, ds: &Dataset) -> Result<f64> {
    let g = last_layer_grad(ws, ds)?;
    Ok(g.data().iter().map(|v| v * v).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thm2Check {
    /// `‖·‖_p` of the target-column gradient expression.
    pub lhs: f64,
    /// Mean of `(1 − s^(k_y))·‖x‖_p`.
    pub rhs: f64,
    pub holds: bool,
    /// `‖∇L‖_p` of the full cross-entropy gradient.
    pub full_grad_norm: f64,
    /// `2^{1/p}·rhs`, the bound that holds for the full gradient.
    pub full_grad_rhs: f64,
    pub full_grad_holds: bool,
}

/// Gradient-norm upper bound for `p ≥ 1`.
///
/// The target-column expression has per-row norm exactly `α‖x‖_p`, so the
/// bound follows from the triangle inequality. The full gradient also
/// carries `s^(k)·x` in the non-target columns, making its per-row norm
/// `‖x‖_p·‖s − y‖_p ≤ 2^{1/p}·α‖x‖_p`; both are reported.
pub fn check_thm2(clf: &LinearClassifier, ds: &Dataset, p: f64) -> Result<Thm2Check> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("gradient bound needs p >= 1, got {p}")));
    }
    let y = ds.require_labels("check_thm2")?;
    let probs = clf.probabilities(ds.features())?;
    let mut rhs = 0.0;
    for (i, x) in ds.features().iter_rows().enumerate() {
        rhs += (1.0 - probs[(i, y[i])]) * lp_norm(x, p)?;
    }
    rhs /= ds.len() as f64;
    let lhs = lp_norm(target_column_grad(clf, ds)?.data(), p)?;
    let full = lp_norm(last_layer_grad(clf, ds)?.data(), p)?;
    let factor = if p.is_infinite() { 1.0 } else { 2f64.powf(1.0 / p) };
    Ok(Thm2Check {
        lhs,
        rhs,
        holds: lhs <= rhs + SLACK,
        full_grad_norm: full,
        full_grad_rhs: factor * rhs,
        full_grad_holds: full <= factor * rhs + SLACK,
    })
}

/// Which sign pattern makes the reverse Minkowski inequality applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignCondition {
    /// `ω_ij·g_ij ≤ 0` everywhere, so `|c| = |ω| + η|g|` entrywise.
    WeightsOpposeGradient,
    /// `c_ij·g_ij ≥ 0` everywhere, so `|ω| = |c| + η|g|` entrywise.
    StepAlignedWithGradient,
    Unmet,
}

impl SignCondition {
    pub fn is_met(self) -> bool {
        self != SignCondition::Unmet
    }
}

fn classify_signs(w: &Matrix, c: &Matrix, g: &Matrix) -> SignCondition {
    let gs = g.data();
    if w.data().iter().zip(gs).all(|(a, b)| a * b <= 0.0) {
        SignCondition::WeightsOpposeGradient
    } else if c.data().iter().zip(gs).all(|(a, b)| a * b >= 0.0) {
        SignCondition::StepAlignedWithGradient
    } else {
        SignCondition::Unmet
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rmk1Check {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub condition: SignCondition,
}

/// `η‖∇L(ω_s)‖_p ≤ |‖c‖_p − ‖ω_s‖_p|` for `0 < p < 1`.
///
/// Only meaningful when [`SignCondition::is_met`]; otherwise `holds` is
/// still computed but should be reported apart from failures.
pub fn check_rmk1(ws: &LinearClassifier, eta: f64, ds: &Dataset, p: f64) -> Result<Rmk1Check> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("p must lie in (0, 1), got {p}")));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be >= 0, got {eta}")));
    }
    let g = last_layer_grad(ws, ds)?;
    let c = ws.weights().axpy(-eta, &g)?;
    let lhs = eta * lp_norm(g.data(), p)?;
    let rhs = (lp_norm(c.data(), p)? - lp_norm(ws.weights().data(), p)?).abs();
    let b = BoundCheck::new(lhs, rhs);
    Ok(Rmk1Check {
        lhs,
        rhs,
        holds: b.holds,
        condition: classify_signs(ws.weights(), &c, &g),
    })
}

/// Weights whose entries oppose the sign of their own gradient.
///
/// Repeats `ω ← −sign(∇L(ω))·|ω|/2`. Halving pulls the gradient toward its
/// value at the origin, so the sign pattern settles unless that gradient
/// has zero entries. Returns the last iterate whether or not it converged.
pub fn sign_opposed_weights(start: &Matrix, ds: &Dataset, max_iter: usize) -> Result<LinearClassifier> {
    let mut clf = LinearClassifier::new(start.clone())?;
    for _ in 0..max_iter {
        let g = last_layer_grad(&clf, ds)?;
        if clf.weights().data().iter().zip(g.data()).all(|(a, b)| a * b <= 0.0) {
            break;
        }
        let w = clf.weights();
        let flipped = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
            let gij = g[(i, j)];
            if gij == 0.0 {
                0.0
            } else {
                -gij.signum() * 0.5 * w[(i, j)].abs()
            }
        });
        clf = LinearClassifier::new(flipped)?;
    }
    Ok(clf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct MotivationalParams {
    pub theta_s: f64,
    pub theta_t: f64,
    /// Variance of the input `x`.
    pub var_x: f64,
    pub c: f64,
    pub n: usize,
}

impl MotivationalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.var_x > 0.0 && self.var_x.is_finite()) {
            return Err(Error::InvalidParameter(format!("input variance must be > 0, got {}", self.var_x)));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        if ![self.theta_s, self.theta_t, self.c].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        Ok(())
    }

    /// Standard deviation of one per-sample gradient `c·x² − x·y`.
    pub fn per_sample_sd(&self) -> f64 {
        let d = self.c - self.theta_s;
        (2.0 * d * d * self.var_x * self.var_x + self.var_x).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotivationalResult {
    pub params: MotivationalParams,
    pub empirical: f64,
    pub analytic: f64,
    pub abs_err: f64,
    /// `4σ/√n`.
    pub band: f64,
    pub within_band: bool,
}

const MC_CHUNK: usize = 1 << 16;

/// Monte-Carlo estimate of `d/dc E[(y − c·x)²]/2` with `x ~ N(0, var_x)` and
/// `y | x ~ N(θ_s·x, 1)`, against the closed form `(c − θ_s)·var_x`.
pub fn motivational_gradient(params: &MotivationalParams, seed: u64) -> Result<MotivationalResult> {
    params.validate()?;
    let sd_x = params.var_x.sqrt();
    let chunks = params.n.div_ceil(MC_CHUNK);
    let total: f64 = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = StreamKey::new(seed).with_str("motivational").with_u64(ci as u64).rng();
            let len = MC_CHUNK.min(params.n - ci * MC_CHUNK);
            let mut acc = 0.0;
            for _ in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = sd_x * z;
                let y = params.theta_s * x + e;
                acc += params.c * x * x - x * y;
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let empirical = total / params.n as f64;
    let analytic = (params.c - params.theta_s) * params.var_x;
    let band = 4.0 * params.per_sample_sd() / (params.n as f64).sqrt();
    let abs_err = (empirical - analytic).abs();
    Ok(MotivationalResult {
        params: *params,
        empirical,
        analytic,
        abs_err,
        band,
        within_band: abs_err <= band,
    })
}

/// A random small classification problem with labels.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub clf: LinearClassifier,
    pub other: LinearClassifier,
    pub data: Dataset,
}

fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// `D ≤ 8`, `K ≤ 4`, `m ≤ 32`, with weight and feature scales drawn from a
/// few decades so that both flat and saturated softmax outputs appear.
pub fn random_instance(key: StreamKey) -> RandomInstance {
    let mut rng = key.rng();
    let d = rng.random_range(1..=8);
    let k = rng.random_range(2..=4);
    let m = rng.random_range(1..=32);
    let scales = [0.1, 0.5, 1.0, 3.0];
    let ws = scales[rng.random_range(0..scales.len())];
    let xs = scales[rng.random_range(0..scales.len())];
    let x = gaussian_matrix(&mut rng, m, d, xs);
    let y = (0..m).map(|_| rng.random_range(0..k)).collect();
    let w = gaussian_matrix(&mut rng, d, k, ws);
    let ss = scales[rng.random_range(0..scales.len())];
    let step = gaussian_matrix(&mut rng, d, k, ss);
    let other = w.add(&step).expect("same shape");
    RandomInstance {
        clf: LinearClassifier::new(w).expect("finite weights"),
        other: LinearClassifier::new(other).expect("finite weights"),
        data: Dataset::new("instance", x, Some(y), k).expect("valid instance"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheorySuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub motivational_draws: usize,
    pub motivational_n: usize,
    pub rmk1_p: f64,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        TheorySuiteConfig {
            instances: 500,
            seed: 7,
            motivational_draws: 20,
            motivational_n: 1_000_000,
            rmk1_p: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Thm1Record {
    pub instance: usize,
    pub p: String,
    pub q: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Cor1Record {
    pub instance: usize,
    pub p: String,
    pub q: String,
    pub eta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Thm2Record {
    pub instance: usize,
    pub p: f64,
    #[serde(flatten)]
    pub check: Thm2Check,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rmk1Record {
    pub instance: usize,
    pub eta: f64,
    #[serde(flatten)]
    pub check: Rmk1Check,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TheorySummary {
    pub thm1_checked: usize,
    pub thm1_violations: usize,
    pub cor1_checked: usize,
    pub cor1_violations: usize,
    pub thm2_checked: usize,
    pub thm2_violations: usize,
    pub thm2_full_grad_violations: usize,
    pub rmk1_precondition_met: usize,
    pub rmk1_precondition_unmet: usize,
    pub rmk1_violations: usize,
    pub rmk1_unmet_bound_failures: usize,
    pub motivational_draws: usize,
    pub motivational_outside_band: usize,
}

impl TheorySummary {
    /// No violation among checks whose preconditions hold.
    pub fn all_hold(&self) -> bool {
        self.thm1_violations == 0
            && self.cor1_violations == 0
            && self.thm2_violations == 0
            && self.rmk1_violations == 0
            && self.motivational_outside_band == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub config: TheorySuiteConfig,
    pub thm1: Vec<Thm1Record>,
    pub cor1: Vec<Cor1Record>,
    pub thm2: Vec<Thm2Record>,
    pub rmk1: Vec<Rmk1Record>,
    pub motivational: Vec<MotivationalResult>,
    pub summary: TheorySummary,
}

fn instance_key(seed: u64, check: &str, i: usize) -> StreamKey {
    StreamKey::new(seed).with_str("theory").with_str(check).with_u64(i as u64)
}

/// A sign-condition instance: even indices start from sign-opposed weights,
/// odd indices use the raw random weights.
fn rmk1_instance(seed: u64, i: usize) -> Result<(LinearClassifier, f64, Dataset)> {
    let key = instance_key(seed, "rmk1", i);
    let inst = random_instance(key);
    let mut rng = key.with_str("eta").rng();
    let eta = 10f64.powf(rng.random_range(-3.0..0.0));
    let clf = if i.is_multiple_of(2) {
        sign_opposed_weights(inst.clf.weights(), &inst.data, 50)?
    } else {
        inst.clf
    };
    Ok((clf, eta, inst.data))
}

fn random_motivational(seed: u64, i: usize, n: usize) -> MotivationalParams {
    let mut rng = instance_key(seed, "motivational", i).rng();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    MotivationalParams {
        theta_s: normal.sample(&mut rng),
        theta_t: normal.sample(&mut rng),
        var_x: rng.random_range(0.25..4.0),
        c: 2.0 * normal.sample(&mut rng),
        n,
    }
}

/// Runs every check over `cfg.instances` random instances in parallel.
/// Results are ordered by instance index and do not depend on scheduling.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Result<TheoryReport> {
    if cfg.instances == 0 {
        return Err(Error::InvalidParameter("instance count must be >= 1".into()));
    }
    let n = cfg.instances;
    let seed = cfg.seed;

    let thm1: Vec<Vec<Thm1Record>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(instance_key(seed, "thm1", i));
            HOLDER_PAIRS
                .iter()
                .map(|&(p, q)| {
                    let b = check_thm1(&inst.clf, &inst.other, &inst.data, p, q)?;
                    Ok(Thm1Record {
                        instance: i,
                        p: norm_label(p),
                        q: norm_label(q),
                        lhs: b.lhs,
                        rhs: b.rhs,
                        holds: b.holds,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let cor1: Vec<Vec<Cor1Record>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(instance_key(seed, "cor1", i));
            let mut out = Vec::new();
            for &(p, q) in &HOLDER_PAIRS {
                for row in check_cor1(&inst.clf, &DEFAULT_ETAS, &inst.data, p, q)? {
                    out.push(Cor1Record {
                        instance: i,
                        p: norm_label(p),
                        q: norm_label(q),
                        eta: row.eta,
                        lhs: row.lhs,
                        rhs: row.rhs,
                        holds: row.holds,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let thm2: Vec<Vec<Thm2Record>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(instance_key(seed, "thm2", i));
            THM2_NORMS
                .iter()
                .map(|&p| {
                    Ok(Thm2Record {
                        instance: i,
                        p,
                        check: check_thm2(&inst.clf, &inst.data, p)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let rmk1: Vec<Rmk1Record> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (clf, eta, ds) = rmk1_instance(seed, i)?;
            Ok(Rmk1Record {
                instance: i,
                eta,
                check: check_rmk1(&clf, eta, &ds, cfg.rmk1_p)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut motivational = Vec::with_capacity(cfg.motivational_draws);
    for i in 0..cfg.motivational_draws {
        let params = random_motivational(seed, i, cfg.motivational_n);
        motivational.push(motivational_gradient(&params, instance_key(seed, "mc", i).value())?);
    }

    let thm1: Vec<Thm1Record> = thm1.into_iter().flatten().collect();
    let cor1: Vec<Cor1Record> = cor1.into_iter().flatten().collect();
    let thm2: Vec<Thm2Record> = thm2.into_iter().flatten().collect();
    let summary = TheorySummary {
        thm1_checked: thm1.len(),
        thm1_violations: thm1.iter().filter(|r| !r.holds).count(),
        cor1_checked: cor1.len(),
        cor1_violations: cor1.iter().filter(|r| !r.holds).count(),
        thm2_checked: thm2.len(),
        thm2_violations: thm2.iter().filter(|r| !r.check.holds).count(),
        thm2_full_grad_violations: thm2.iter().filter(|r| !r.check.full_grad_holds).count(),
        rmk1_precondition_met: rmk1.iter().filter(|r| r.check.condition.is_met()).count(),
        rmk1_precondition_unmet: rmk1.iter().filter(|r| !r.check.condition.is_met()).count(),
        rmk1_violations: rmk1
            .iter()
            .filter(|r| r.check.condition.is_met() && !r.check.holds)
            .count(),
        rmk1_unmet_bound_failures: rmk1
            .iter()
            .filter(|r| !r.check.condition.is_met() && !r.check.holds)
            .count(),
        motivational_draws: motivational.len(),
        motivational_outside_band: motivational.iter().filter(|r| !r.within_band).count(),
    };
    Ok(TheoryReport {
        config: *cfg,
        thm1,
        cor1,
        thm2,
        rmk1,
        motivational,
        summary,
    })
}
