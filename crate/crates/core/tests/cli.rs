use std::path::Path;
use std::process::{Command, Output};

use rotcnn::cnn::Architecture;
use rotcnn::hmax::{rotated_spec, GFunc};
use rotcnn::synth::Dataset;

fn rotcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotcnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rotcnn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn compile_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    let weights = dir.path().join("w.json");
    let report = dir.path().join("report.json");
    let funcs = vec![vec![GFunc::Identity; 16], vec![GFunc::Max4; 4], vec![GFunc::Mean4]];
    rotated_spec(10, 0.25, 2, funcs).unwrap().save(&spec_path).unwrap();
    ok(&["compile", "--spec", s(&spec_path), "--out", s(&weights)]);
    let arch = Architecture::load(&weights).unwrap();
    assert_eq!(arch.branches.len(), 2);
    let text = ok(&["verify", "--spec", s(&spec_path), "--weights", s(&weights), "--samples", "20", "--out", s(&report)]);
    assert!(text.contains("max deviation"));
    assert!(std::fs::read_to_string(&report).unwrap().contains("max_deviation"));

    // A spec whose g-function has no ReLU form is refused.
    let bad = rotated_spec(10, 0.25, 1, vec![vec![GFunc::Identity; 16], vec![GFunc::ProductClamped; 4], vec![GFunc::Max4]]).unwrap();
    bad.save(&spec_path).unwrap();
    assert!(!rotcnn(&["compile", "--spec", s(&spec_path), "--out", s(&weights)]).status.success());
}

#[test]
fn gen_data_writes_a_container() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.rsd");
    let b = dir.path().join("b.rsd");
    ok(&["gen-data", "--n", "12", "--lambda", "16", "--seed", "3", "--out", s(&a)]);
    ok(&["--sequential", "gen-data", "--n", "12", "--lambda", "16", "--seed", "3", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let data = Dataset::read(&a).unwrap();
    assert_eq!((data.len(), data.lambda), (12, 16));
    assert!(!rotcnn(&["gen-data", "--n", "0", "--lambda", "16", "--out", s(&a)]).status.success());
}

#[test]
fn import_mnist_rot_keeps_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("mnist.txt");
    let out = dir.path().join("m.rsd");
    let mut text = String::new();
    for (k, digit) in [4, 9, 1, 4].into_iter().enumerate() {
        let row: Vec<String> = (0..784).map(|p| format!("{}", ((p + k) % 7) as f64 / 7.0)).collect();
        text.push_str(&format!("{} {digit}\n", row.join(" ")));
    }
    std::fs::write(&input, text).unwrap();
    let msg = ok(&["import-mnist-rot", "--in", s(&input), "--classes", "4,9", "--out", s(&out)]);
    assert!(msg.contains("kept 3 images, dropped 1"));
    let data = Dataset::read(&out).unwrap();
    assert_eq!(data.labels, vec![0, 1, 0]);
    assert_eq!(data.lambda, 28);
    assert!(!rotcnn(&["import-mnist-rot", "--in", s(&input), "--classes", "4", "--out", s(&out)]).status.success());
}

#[test]
fn train_writes_weights_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.rsd");
    let weights = dir.path().join("w.json");
    let log = dir.path().join("log.csv");
    ok(&["gen-data", "--n", "16", "--lambda", "12", "--seed", "1", "--out", s(&data)]);
    ok(&["train", "--family", "F3", "--data", s(&data), "--t", "1", "--epochs", "3", "--out", s(&weights), "--log", s(&log)]);
    assert_eq!(Architecture::load(&weights).unwrap().branches.len(), 1);
    let rows = std::fs::read_to_string(&log).unwrap();
    assert!(rows.starts_with("epoch,loss,wall_ms\n"));
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn experiment_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(format!("{name}.csv"));
        let summary = dir.path().join(format!("{name}.summary.csv"));
        let audit = dir.path().join(format!("{name}.audit.csv"));
        ok(&[
            "experiment", "--family", "F2", "--n", "20", "--lambda", "12", "--reps", "2", "--seed", "4", "--test-size", "20",
            "--grid-l", "2", "--grid-k", "2", "--grid-ln", "1", "--grid-t", "1,2", "--epochs", "2", "--no-timing",
            "--out", s(&out), "--summary", s(&summary), "--audit", s(&audit),
        ]);
        (std::fs::read(&out).unwrap(), std::fs::read_to_string(&summary).unwrap(), std::fs::read_to_string(&audit).unwrap())
    };
    let (a, summary, audit) = run("a");
    let (b, _, _) = run("b");
    assert_eq!(a, b);
    assert!(summary.contains("family,median,iqr\nF2,"));
    // Header plus one row per grid point per replicate.
    assert_eq!(audit.lines().count(), 1 + 2 * 2);
}
