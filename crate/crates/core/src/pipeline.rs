//! End-to-end runs: train on the source split, score every shifted test set,
//! correlate scores with true accuracy, and sweep ablation grids.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchgen::{gen_shift_suite, load_suite, BenchConfig, ShiftSuite};
use crate::correlation::{ScorePair, ScoreReport};
use crate::dataio::{save_report, to_json_string, write_json, Dataset};
use crate::error::{Error, Result};
use crate::labeling::{generate_labels, LabelKind};
use crate::model::{accuracy, sgd_fit, sgd_train, LinearClassifier, TrainConfig, TrainOutcome};
use crate::scores::{
    agree_score, atc_score, atc_threshold, conf_score, dispersion_score, entropy_score, frechet_from_stats, gdscore,
    nuclear_score, projnorm_score, FeatureStats, LossKind, Method, ScoreConfig,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory holding `suite.json`; generated from `[bench]` when unset.
    pub suite: Option<PathBuf>,
    /// Where reports go.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub train: u64,
    /// Second classifier, only trained when `agree` is requested.
    pub agree: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { train: 0, agree: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 64,
            momentum: 0.9,
            init_scale: 0.01,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// SGD settings for fine-tuning on pseudo-labelled test data in the epoch
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            learning_rate: 1e-3,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub tau: Vec<f64>,
    pub p: Vec<f64>,
    pub epochs: Vec<usize>,
    pub strategy: Vec<LabelKind>,
    pub loss: Vec<LossKind>,
    /// Required before `truth` may appear in the strategy grid, since it
    /// reads test labels.
    pub allow_ground_truth: bool,
    pub finetune: FinetuneSection,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            tau: (0..10).map(|i| i as f64 / 10.0).collect(),
            p: vec![0.1, 0.3, 0.5, 1.0, 2.0, f64::INFINITY],
            epochs: vec![1, 2, 5, 10],
            strategy: vec![LabelKind::Mixed, LabelKind::Pseudo, LabelKind::Random, LabelKind::Uniform],
            loss: LossKind::ALL.to_vec(),
            allow_ground_truth: false,
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub methods: Vec<Method>,
    pub paths: PathsSection,
    pub seeds: SeedsSection,
    pub bench: BenchConfig,
    pub train: TrainSection,
    pub score: ScoreConfig,
    pub ablation: AblationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            methods: Method::ALL.to_vec(),
            paths: PathsSection::default(),
            seeds: SeedsSection::default(),
            bench: BenchConfig::default(),
            train: TrainSection::default(),
            score: ScoreConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Tau,
    P,
    Epochs,
    Strategy,
    Loss,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tau" => AblationAxis::Tau,
            "p" => AblationAxis::P,
            "epochs" => AblationAxis::Epochs,
            "strategy" => AblationAxis::Strategy,
            "loss" => AblationAxis::Loss,
            _ => return Err(Error::InvalidParameter(format!("unknown ablation axis {s:?}"))),
        })
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Tau => "tau",
            AblationAxis::P => "p",
            AblationAxis::Epochs => "epochs",
            AblationAxis::Strategy => "strategy",
            AblationAxis::Loss => "loss",
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        let unique: BTreeSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::Config("methods listed twice".into()));
        }
        if let (Some(a), Some(b)) = (&self.paths.suite, &self.paths.out) {
            if a == b {
                return Err(Error::Config(format!("suite and out both point at {}", a.display())));
            }
        }
        if self.seeds.train == self.seeds.agree && self.methods.contains(&Method::Agree) {
            return Err(Error::Config("agree needs two different training seeds".into()));
        }
        self.bench.validate()?;
        self.train.train_config(self.seeds.train).validate()?;
        if !(self.train.init_scale >= 0.0 && self.train.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        self.score.validate()
    }

    fn check_axis(&self, axis: AblationAxis) -> Result<()> {
        let a = &self.ablation;
        let empty = match axis {
            AblationAxis::Tau => a.tau.is_empty(),
            AblationAxis::P => a.p.is_empty(),
            AblationAxis::Epochs => a.epochs.is_empty(),
            AblationAxis::Strategy => a.strategy.is_empty(),
            AblationAxis::Loss => a.loss.is_empty(),
        };
        if empty {
            return Err(Error::Config(format!("ablation grid {} is empty", axis.name())));
        }
        if axis == AblationAxis::Strategy && a.strategy.contains(&LabelKind::Truth) && !a.allow_ground_truth {
            return Err(Error::Config(
                "strategy grid contains truth but allow_ground_truth is false".into(),
            ));
        }
        if axis == AblationAxis::Epochs && a.epochs.contains(&0) {
            return Err(Error::Config("epoch grid entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn suite(&self) -> Result<ShiftSuite> {
        match &self.paths.suite {
            Some(dir) => load_suite(dir),
            None => gen_shift_suite(&self.bench),
        }
    }
}

/// Source classifier trained from a seeded random start.
pub fn train_source(train: &Dataset, section: &TrainSection, seed: u64) -> Result<TrainOutcome> {
    let init = LinearClassifier::random_init(train.dim(), train.num_classes(), section.init_scale, seed)?;
    sgd_train(&init, train, &section.train_config(seed))
}

/// What the scores need from the source side, computed once per run.
pub struct SourceContext<'a> {
    pub suite: &'a ShiftSuite,
    pub classifier: LinearClassifier,
    pub second: Option<LinearClassifier>,
    pub stats: Option<FeatureStats>,
    pub atc_threshold: Option<f64>,
}

impl<'a> SourceContext<'a> {
    pub fn build(suite: &'a ShiftSuite, cfg: &PipelineConfig) -> Result<(Self, TrainingLog)> {
        let main = train_source(&suite.train, &cfg.train, cfg.seeds.train).map_err(|e| e.in_stage("train"))?;
        let second = if cfg.methods.contains(&Method::Agree) {
            Some(
                train_source(&suite.train, &cfg.train, cfg.seeds.agree)
                    .map_err(|e| e.in_stage("train"))?
                    .classifier,
            )
        } else {
            None
        };
        let stats = if cfg.methods.contains(&Method::Frechet) {
            Some(FeatureStats::of(&suite.train).map_err(|e| e.in_stage("score"))?)
        } else {
            None
        };
        let atc = if cfg.methods.contains(&Method::Atc) {
            Some(atc_threshold(&main.classifier, &suite.validation).map_err(|e| e.in_stage("score"))?)
        } else {
            None
        };
        let log = TrainingLog {
            validation_accuracy: accuracy(&main.classifier, &suite.validation)?,
            train_accuracy: accuracy(&main.classifier, &suite.train)?,
            final_loss: main.final_loss,
            epoch_grad_norms: main.epoch_grad_norms.clone(),
            atc_threshold: atc,
        };
        Ok((
            SourceContext {
                suite,
                classifier: main.classifier,
                second,
                stats,
                atc_threshold: atc,
            },
            log,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub validation_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub epoch_grad_norms: Vec<f64>,
    pub atc_threshold: Option<f64>,
}

/// One method on one label-stripped test set. A degenerate dispersion is
/// reported as missing rather than failing the run.
fn score_one(ctx: &SourceContext<'_>, method: Method, test: &Dataset, cfg: &ScoreConfig) -> Result<Option<f64>> {
    let clf = &ctx.classifier;
    let v = match method {
        Method::GdScore => gdscore(clf, test, cfg),
        Method::Conf => conf_score(clf, test),
        Method::Entropy => entropy_score(clf, test),
        Method::Agree => {
            let b = ctx.second.as_ref().ok_or_else(|| Error::Config("agree needs a second classifier".into()))?;
            agree_score(clf, b, test)
        }
        Method::Atc => {
            let t = ctx.atc_threshold.ok_or_else(|| Error::Config("ATC threshold not computed".into()))?;
            atc_score(clf, test, t)
        }
        Method::Frechet => {
            let s = ctx.stats.as_ref().ok_or_else(|| Error::Config("source statistics not computed".into()))?;
            frechet_from_stats(s, &FeatureStats::of(test)?)
        }
        Method::Dispersion => match dispersion_score(clf, test) {
            Err(Error::DegenerateDispersion) => return Ok(None),
            other => other,
        },
        Method::Nuclear => nuclear_score(clf, test),
        Method::ProjNorm => projnorm_score(clf, test, cfg),
    };
    Ok(Some(v?.value))
}

/// True accuracy per test set, in suite order. The only place test labels
/// are read outside the ground-truth ablation.
pub fn test_accuracies(clf: &LinearClassifier, suite: &ShiftSuite) -> Result<Vec<f64>> {
    suite.tests.par_iter().map(|t| accuracy(clf, &t.data)).collect()
}

/// One report per method, pairs in suite order.
pub fn evaluate(ctx: &SourceContext<'_>, methods: &[Method], cfg: &ScoreConfig) -> Result<Vec<ScoreReport>> {
    let accs = test_accuracies(&ctx.classifier, ctx.suite).map_err(|e| e.in_stage("accuracy"))?;
    let views: Vec<Dataset> = ctx.suite.tests.iter().map(|t| t.data.without_labels()).collect();
    let cells: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|mi| (0..views.len()).map(move |ti| (mi, ti)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(mi, ti)| score_one(ctx, methods[mi], &views[ti], cfg))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("score"))?;
    methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let pairs = views
                .iter()
                .enumerate()
                .map(|(ti, v)| ScorePair {
                    name: v.name().to_string(),
                    score: values[mi * views.len() + ti],
                    accuracy: accs[ti],
                })
                .collect();
            ScoreReport::from_pairs(m.name(), pairs).map_err(|e| e.in_stage("correlate"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub r2: f64,
    pub spearman: f64,
    pub abs_spearman: f64,
    pub scored: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub training: TrainingLog,
    pub methods: Vec<SummaryRow>,
}

pub fn summarize(reports: &[ScoreReport], training: TrainingLog) -> RunSummary {
    RunSummary {
        training,
        methods: reports
            .iter()
            .map(|r| {
                let scored = r.scored_pairs().len();
                SummaryRow {
                    method: r.method.clone(),
                    r2: r.r2,
                    spearman: r.spearman,
                    abs_spearman: r.spearman.abs(),
                    scored,
                    missing: r.per_dataset.len() - scored,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reports: Vec<ScoreReport>,
    pub summary: RunSummary,
}

/// Generate or load the suite, train, score, and correlate. Nothing is
/// written to disk.
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let suite = cfg.suite().map_err(|e| e.in_stage("suite"))?;
    let (ctx, log) = SourceContext::build(&suite, cfg)?;
    let reports = evaluate(&ctx, &cfg.methods, &cfg.score)?;
    let summary = summarize(&reports, log);
    Ok(PipelineOutput { reports, summary })
}

pub fn scatter_csv(report: &ScoreReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidInput(format!("scatter csv: {e}"));
    w.write_record(["name", "score", "accuracy"]).map_err(err)?;
    for p in &report.per_dataset {
        let score = p.score.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([p.name.as_str(), &score, &p.accuracy.to_string()]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("scatter csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_file(method: &str) -> String {
    format!("{method}.report.json")
}

pub fn scatter_file(method: &str) -> String {
    format!("{method}.scatter.csv")
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Files are written into a staging directory next to `out` and moved into
/// place only after every stage has succeeded; a failed run leaves `out`
/// untouched.
fn publish(out: &Path, write: impl FnOnce(&Path) -> Result<Vec<String>>) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".shiftscore-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let files = write(staging.path()).map_err(|e| e.in_stage("write"))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for f in files {
        let dst = out.join(&f);
        fs::rename(staging.path().join(&f), &dst).map_err(|e| Error::io(&dst, e))?;
    }
    Ok(())
}

/// [`run_in_memory`] plus a report and scatter CSV per method and a
/// `summary.json` under `paths.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| Error::Config("paths.out is not set".into()))?;
    let result = run_in_memory(cfg)?;
    publish(&out, |dir| {
        let mut files = Vec::new();
        for r in &result.reports {
            let f = report_file(&r.method);
            save_report(r, dir.join(&f))?;
            files.push(f);
            let f = scatter_file(&r.method);
            let p = dir.join(&f);
            fs::write(&p, scatter_csv(r)?).map_err(|e| Error::io(&p, e))?;
            files.push(f);
        }
        write_json(&result.summary, dir.join(SUMMARY_FILE))?;
        files.push(SUMMARY_FILE.into());
        Ok(files)
    })?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub r2: f64,
    pub spearman: f64,
    pub abs_spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormSeries {
    pub name: String,
    /// Full-data gradient norm at the start of each fine-tuning epoch;
    /// entry 0 is the source weights.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Only for the epoch axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm_series: Option<Vec<GradNormSeries>>,
}

fn row(setting: String, report: &ScoreReport) -> AblationRow {
    AblationRow {
        setting,
        r2: report.r2,
        spearman: report.spearman,
        abs_spearman: report.spearman.abs(),
    }
}

fn fmt_setting(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// GdScore on every test set. Test labels are passed through only for the
/// ground-truth strategy.
fn gdscore_report(ctx: &SourceContext<'_>, cfg: &ScoreConfig) -> Result<ScoreReport> {
    let accs = test_accuracies(&ctx.classifier, ctx.suite)?;
    let values = ctx
        .suite
        .tests
        .par_iter()
        .map(|t| {
            let view = if cfg.labels == LabelKind::Truth {
                t.data.clone()
            } else {
                t.data.without_labels()
            };
            gdscore(&ctx.classifier, &view, cfg).map(|v| v.value)
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = ctx
        .suite
        .tests
        .iter()
        .zip(values.iter().zip(&accs))
        .map(|(t, (&s, &a))| ScorePair {
            name: t.data.name().to_string(),
            score: Some(s),
            accuracy: a,
        })
        .collect();
    ScoreReport::from_pairs(Method::GdScore.name(), pairs)
}

/// Fine-tunes on each pseudo-labelled test set for `max(grid)` epochs; the
/// score for `r` epochs is the gradient norm collected in epoch `r`, so
/// `r = 1` is the plain score at the source weights.
fn epoch_ablation(ctx: &SourceContext<'_>, cfg: &PipelineConfig) -> Result<AblationTable> {
    let grid = &cfg.ablation.epochs;
    let max_r = *grid.iter().max().expect("grid checked non-empty");
    let ft = cfg.ablation.finetune;
    let sc = &cfg.score;
    let accs = test_accuracies(&ctx.classifier, ctx.suite)?;
    let series = ctx
        .suite
        .tests
        .par_iter()
        .map(|t| {
            let view = t.data.without_labels();
            let targets = generate_labels(&ctx.classifier, &view, sc.label_strategy(), sc.seed)?;
            let tc = TrainConfig {
                learning_rate: ft.learning_rate,
                epochs: max_r,
                batch_size: ft.batch_size,
                momentum: ft.momentum,
                seed: crate::rng::StreamKey::new(sc.seed).with_str("finetune").with_str(view.name()).value(),
                grad_norm_p: sc.p,
            };
            let out = sgd_fit(&ctx.classifier, view.features(), &targets, sc.loss_variant(), &tc)?;
            Ok(GradNormSeries {
                name: view.name().to_string(),
                norms: out.epoch_grad_norms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &r in grid {
        let pairs = series
            .iter()
            .zip(&accs)
            .map(|(s, &a)| ScorePair {
                name: s.name.clone(),
                score: Some(s.norms[r - 1]),
                accuracy: a,
            })
            .collect();
        rows.push(row(r.to_string(), &ScoreReport::from_pairs(Method::GdScore.name(), pairs)?));
    }
    Ok(AblationTable {
        axis: AblationAxis::Epochs,
        rows,
        grad_norm_series: Some(series),
    })
}

/// Sweep one grid with everything else held at the config values.
pub fn run_ablation(cfg: &PipelineConfig, axis: AblationAxis) -> Result<AblationTable> {
    cfg.validate()?;
    cfg.check_axis(axis)?;
    let suite = cfg.suite().map_err(|e| e.in_stage("suite"))?;
    let train_only = PipelineConfig {
        methods: vec![Method::GdScore],
        ..cfg.clone()
    };
    let (ctx, _) = SourceContext::build(&suite, &train_only)?;
    if axis == AblationAxis::Epochs {
        return epoch_ablation(&ctx, cfg).map_err(|e| e.in_stage("ablation"));
    }
    let a = &cfg.ablation;
    let settings: Vec<(String, ScoreConfig)> = match axis {
        AblationAxis::Tau => a.tau.iter().map(|&tau| (fmt_setting(tau), ScoreConfig { tau, ..cfg.score })).collect(),
        AblationAxis::P => a.p.iter().map(|&p| (fmt_setting(p), ScoreConfig { p, ..cfg.score })).collect(),
        AblationAxis::Strategy => a
            .strategy
            .iter()
            .map(|&labels| (labels.name().to_string(), ScoreConfig { labels, ..cfg.score }))
            .collect(),
        AblationAxis::Loss => a
            .loss
            .iter()
            .map(|&loss| (loss.name().to_string(), ScoreConfig { loss, ..cfg.score }))
            .collect(),
        AblationAxis::Epochs => unreachable!(),
    };
    let rows = settings
        .into_iter()
        .map(|(name, sc)| {
            sc.validate()?;
            Ok(row(name, &gdscore_report(&ctx, &sc)?))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("ablation"))?;
    Ok(AblationTable {
        axis,
        rows,
        grad_norm_series: None,
    })
}

/// Deterministic JSON for any pipeline artefact.
pub fn render<T: Serialize>(value: &T) -> Result<String> {
    to_json_string(value)
}
