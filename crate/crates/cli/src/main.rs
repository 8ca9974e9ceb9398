use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use shiftscore_core::benchgen::{gen_shift_suite, write_suite, BenchConfig};
use shiftscore_core::correlation::{ScorePair, ScoreReport};
use shiftscore_core::dataio::{load_checkpoint, load_csv, save_checkpoint, save_report, to_json_string, write_json};
use shiftscore_core::labeling::LabelKind;
use shiftscore_core::model::accuracy;
use shiftscore_core::pipeline::{run_ablation, run_pipeline, train_source, AblationAxis, PipelineConfig, TrainSection};
use shiftscore_core::scores::{
    agree_score, atc_score, atc_threshold, conf_score, dispersion_score, entropy_score, frechet_score, gdscore,
    nuclear_score, projnorm_score, LossKind, Method, ScoreConfig,
};
use shiftscore_core::theory::{run_theory_suite, TheorySuiteConfig};
use shiftscore_core::{Checkpoint, Error, LinearClassifier, Result, TrainMeta};

#[derive(Parser)]
#[command(name = "shiftscore", version, about = "Label-free accuracy estimation under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source set and shifted test suite.
    Gen {
        /// TOML generator settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear classifier on a labelled CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0.01)]
        init_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one test CSV with one method.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Method,
        /// The test CSV has a trailing label column.
        #[arg(long)]
        labelled: bool,
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value = "mixed")]
        labels: LabelKind,
        #[arg(long, default_value = "ce")]
        loss: LossKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source training CSV (frechet).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Labelled source validation CSV (atc).
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Second checkpoint (agree).
        #[arg(long)]
        second: Option<PathBuf>,
    },
    /// Fit R² and Spearman from a CSV of name,score,accuracy rows.
    Correlate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the gradient-norm bounds on random instances.
    TheoryCheck {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        mc_draws: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one ablation grid from a pipeline config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and print a summary table.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg: BenchConfig = match config {
                Some(p) => toml::from_str(&read_text(&p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => BenchConfig::default(),
            };
            let suite = gen_shift_suite(&cfg)?;
            write_suite(&suite, &out)?;
            println!("wrote {} test sets to {}", suite.tests.len(), out.display());
        }
        Command::Train {
            data,
            classes,
            lr,
            epochs,
            batch,
            momentum,
            init_scale,
            seed,
            out,
        } => {
            let ds = load_csv(&data, true, classes)?;
            let section = TrainSection {
                learning_rate: lr,
                epochs,
                batch_size: batch,
                momentum,
                init_scale,
            };
            let outcome = train_source(&ds, &section, seed)?;
            let acc = accuracy(&outcome.classifier, &ds)?;
            let meta = TrainMeta {
                seed,
                epochs: u32::try_from(epochs).map_err(|_| Error::InvalidParameter("epochs exceeds u32".into()))?,
                learning_rate: lr,
            };
            save_checkpoint(
                &Checkpoint {
                    weights: outcome.classifier.into_weights(),
                    meta,
                },
                &out,
            )?;
            println!("train accuracy {acc:.4}, final loss {:.6}", outcome.final_loss);
        }
        Command::Score {
            model,
            data,
            method,
            labelled,
            p,
            tau,
            labels,
            loss,
            seed,
            source,
            validation,
            second,
        } => {
            let clf = LinearClassifier::new(load_checkpoint(&model)?.weights)?;
            let k = clf.num_classes();
            let raw = load_csv(&data, labelled, k)?;
            // labels stay attached only for the ground-truth strategy
            let test = if labels == LabelKind::Truth { raw } else { raw.without_labels() };
            let cfg = ScoreConfig {
                p,
                tau,
                labels,
                loss,
                seed,
                ..ScoreConfig::default()
            };
            let need = |o: Option<PathBuf>, flag: &str| {
                o.ok_or_else(|| Error::InvalidParameter(format!("{method} needs --{flag}")))
            };
            let v = match method {
                Method::GdScore => gdscore(&clf, &test, &cfg),
                Method::Conf => conf_score(&clf, &test),
                Method::Entropy => entropy_score(&clf, &test),
                Method::Agree => {
                    let b = LinearClassifier::new(load_checkpoint(need(second, "second")?)?.weights)?;
                    agree_score(&clf, &b, &test)
                }
                Method::Atc => {
                    let val = load_csv(need(validation, "validation")?, true, k)?;
                    atc_score(&clf, &test, atc_threshold(&clf, &val)?)
                }
                Method::Frechet => {
                    let src = load_csv(need(source, "source")?, true, k)?;
                    frechet_score(&src, &test)
                }
                Method::Dispersion => dispersion_score(&clf, &test),
                Method::Nuclear => nuclear_score(&clf, &test),
                Method::ProjNorm => projnorm_score(&clf, &test, &cfg),
            }?;
            let out = json!({
                "method": v.method.name(),
                "value": v.value,
                "direction": v.direction,
            });
            print!("{}", to_json_string(&out)?);
        }
        Command::Correlate { scores, method, out } => {
            let pairs = read_pairs(&scores)?;
            let report = ScoreReport::from_pairs(method, pairs)?;
            save_report(&report, &out)?;
            println!(
                "{}: R2 {:.4}, |spearman| {:.4} over {} sets",
                report.method,
                report.r2,
                report.spearman.abs(),
                report.scored_pairs().len()
            );
        }
        Command::TheoryCheck {
            instances,
            seed,
            mc_draws,
            mc_samples,
            out,
        } => {
            let cfg = TheorySuiteConfig {
                instances,
                seed,
                motivational_draws: mc_draws,
                motivational_n: mc_samples,
                ..TheorySuiteConfig::default()
            };
            let report = run_theory_suite(&cfg)?;
            write_json(&report, &out)?;
            let s = report.summary;
            println!("thm1  {} checked, {} violations", s.thm1_checked, s.thm1_violations);
            println!("cor1  {} checked, {} violations", s.cor1_checked, s.cor1_violations);
            println!(
                "thm2  {} checked, {} violations ({} for the full gradient against the 2^(1/p) bound)",
                s.thm2_checked, s.thm2_violations, s.thm2_full_grad_violations
            );
            println!(
                "rmk1  {} with sign precondition, {} violations; {} without",
                s.rmk1_precondition_met, s.rmk1_violations, s.rmk1_precondition_unmet
            );
            println!(
                "motivational  {} draws, {} outside 4 sigma",
                s.motivational_draws, s.motivational_outside_band
            );
            if !s.all_hold() {
                return Err(Error::DegenerateFit("theory checks reported violations".into()));
            }
        }
        Command::Ablate { config, axis, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let table = run_ablation(&cfg, axis)?;
            write_json(&table, &out)?;
            println!("{:<12} {:>8} {:>10}", axis.name(), "R2", "|rho|");
            for r in &table.rows {
                println!("{:<12} {:>8.4} {:>10.4}", r.setting, r.r2, r.abs_spearman);
            }
        }
        Command::Report { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if out.is_some() {
                cfg.paths.out = out;
            }
            let result = run_pipeline(&cfg)?;
            let t = &result.summary.training;
            println!(
                "source: train accuracy {:.4}, validation accuracy {:.4}",
                t.train_accuracy, t.validation_accuracy
            );
            println!("{:<12} {:>8} {:>10} {:>8}", "method", "R2", "|rho|", "missing");
            for r in &result.summary.methods {
                println!("{:<12} {:>8.4} {:>10.4} {:>8}", r.method, r.r2, r.abs_spearman, r.missing);
            }
        }
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))
}

/// `name,score,accuracy` rows; an empty score cell is a missing score.
fn read_pairs(path: &Path) -> Result<Vec<ScorePair>> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["name", "score", "accuracy"] {
        return Err(parse_err(path, 1, "expected header name,score,accuracy".into()));
    }
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| parse_err(path, line, format!("{s:?}: {e}")));
        let score = match rec[1].trim() {
            "" => None,
            s => Some(num(s)?),
        };
        pairs.push(ScorePair {
            name: rec[0].to_string(),
            score,
            accuracy: num(&rec[2])?,
        });
    }
    Ok(pairs)
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}
