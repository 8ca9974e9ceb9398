use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shiftscore_core::benchgen::load_suite;
use shiftscore_core::dataio::{load_checkpoint, load_report};
use shiftscore_core::model::accuracy;
use shiftscore_core::LinearClassifier;

fn shiftscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftscore"))
        .args(args)
        .output()
        .expect("spawn shiftscore")
}

fn ok(args: &[&str]) -> String {
    let out = shiftscore(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_BENCH: &str = r#"
num_classes = 3
dim = 4
per_class = 60
test_size = 150
families = ["mean_shift", "additive_noise"]
severities = [1, 3, 5]
"#;

#[test]
fn gen_train_score_correlate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.toml");
    fs::write(&bench, SMALL_BENCH).unwrap();
    let data = dir.path().join("suite");
    ok(&["gen", "--config", s(&bench), "--out", s(&data)]);

    let suite = load_suite(&data).unwrap();
    assert_eq!(suite.tests.len(), 6);

    let model = dir.path().join("model.ckpt");
    let train = data.join("source_train.csv");
    ok(&[
        "train", "--data", s(&train), "--classes", "3", "--epochs", "100", "--out", s(&model),
    ]);
    let clf = LinearClassifier::new(load_checkpoint(&model).unwrap().weights).unwrap();

    let mut csv = String::from("name,score,accuracy\n");
    for t in &suite.tests {
        let name = t.data.name();
        let file = data.join(format!("{name}.csv"));
        let out = ok(&[
            "score", "--model", s(&model), "--data", s(&file), "--method", "gdscore", "--labelled",
        ]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["method"], "gdscore");
        assert_eq!(v["direction"], "higher_means_higher_error");
        let score = v["value"].as_f64().unwrap();
        assert!(score.is_finite() && score >= 0.0);
        let acc = accuracy(&clf, &t.data).unwrap();
        csv.push_str(&format!("{name},{score},{acc}\n"));
    }
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, csv).unwrap();
    let report = dir.path().join("gdscore.report.json");
    ok(&["correlate", "--scores", s(&scores), "--method", "gdscore", "--out", s(&report)]);
    let rep = load_report(&report).unwrap();
    assert_eq!(rep.per_dataset.len(), 6);
    assert!((0.0..=1.0).contains(&rep.r2));
    assert!((-1.0..=1.0).contains(&rep.spearman));
}

#[test]
fn score_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    fs::write(&train, "f0,f1,label\n1,0,0\n0,1,1\n1.5,0.2,0\n0.1,2,1\n").unwrap();
    let model = dir.path().join("m.ckpt");
    ok(&["train", "--data", s(&train), "--classes", "2", "--out", s(&model)]);
    let args = ["score", "--model", s(&model), "--data", s(&train), "--method", "gdscore", "--labelled"];
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn missing_file_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = shiftscore(&[
        "train",
        "--data",
        s(&dir.path().join("nope.csv")),
        "--classes",
        "2",
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[score]\np = -1.0\n").unwrap();
    let out = shiftscore(&["report", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&cfg, "[score]\nbogus_key = 1\n").unwrap();
    let out = shiftscore(&["report", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = shiftscore(&["score", "--model", "m", "--data", "d", "--method", "magic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_dispersion_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    fs::write(&train, "f0,f1,label\n1,0,0\n0,1,1\n1,0.1,0\n0.1,1,1\n").unwrap();
    let model = dir.path().join("m.ckpt");
    ok(&["train", "--data", s(&train), "--classes", "2", "--out", s(&model)]);
    let same = dir.path().join("same.csv");
    fs::write(&same, "f0,f1\n1,1\n1,1\n1,1\n").unwrap();
    let out = shiftscore(&["score", "--model", s(&model), "--data", s(&same), "--method", "dispersion"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn theory_check_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory.json");
    let stdout = ok(&[
        "theory-check",
        "--instances",
        "20",
        "--mc-draws",
        "2",
        "--mc-samples",
        "10000",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("thm1  60 checked, 0 violations"), "{stdout}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["summary"]["thm2_violations"], 0);
}
