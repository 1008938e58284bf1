use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparq_core::tensor::{rand_matrix, Distribution};
use sparq_core::{quantize, sparsify, Matrix, QuantSpec, Rng, SparsitySpec};
use sparq_harness::dataset::{write_idx_images, write_idx_labels};
use sparq_harness::experiment::RunReport;

fn sparq(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparq"))
        .args(args)
        .env("SPARQ_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
name = tiny
dataset.classes = 3
dataset.samples = 40
dataset.dim = 8
dataset.noise = 0.5
hidden = 8
epochs = 2
sparsity = 2:4
awconfig = A4/W4
reg = cosine
seed = 4
";

#[test]
fn train_eval_and_reproduce_from_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let out = sparq(tmp.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let run = tmp.path().join("tiny");
    for f in [
        "config.txt",
        "report.json",
        "epochs.csv",
        "steps.csv",
        "deviation.csv",
        "checkpoint/scales.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let steps = fs::read_to_string(run.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,task_loss,reg_loss,lambda,accuracy\n"));
    let report = RunReport::from_json(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();

    let out = sparq(tmp.path(), &["eval", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let acc: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((acc - report.final_test_accuracy).abs() < 1e-9);

    // The echo alone reproduces the report.
    let echo = fs::read_to_string(run.join("config.txt"))
        .unwrap()
        .replace("name = tiny", "name = again");
    let again_cfg = tmp.path().join("again.txt");
    fs::write(&again_cfg, echo).unwrap();
    let out = sparq(tmp.path(), &["train", again_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let a = fs::read_to_string(run.join("report.json")).unwrap();
    let b = fs::read_to_string(tmp.path().join("again/report.json")).unwrap();
    assert_eq!(a.replace("\"tiny\"", "\"again\""), b);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = sparq(tmp.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown key `learning_rate`"));
    assert!(!tmp.path().join("run").exists());

    let out = sparq(tmp.path(), &["train", tmp.path().join("missing.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = sparq(tmp.path(), &["pack", "x.csv", "-o", "y.sqpk", "--sparsity", "5:4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sparq(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_idx_exits_3_with_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut images = write_idx_images(4, 2, 2, &[7; 16]);
    images.truncate(16 + 10);
    fs::write(tmp.path().join("img.idx"), images).unwrap();
    fs::write(tmp.path().join("lbl.idx"), write_idx_labels(&[0, 1, 0, 1])).unwrap();
    let cfg = format!(
        "dataset = idx-images\ndataset.images = {}\ndataset.labels = {}\nhidden = 4\nepochs = 1\n",
        tmp.path().join("img.idx").display(),
        tmp.path().join("lbl.idx").display()
    );
    fs::write(tmp.path().join("idx.txt"), cfg).unwrap();
    let out = sparq(tmp.path(), &["train", tmp.path().join("idx.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("byte offset 26"), "{}", stderr(&out));
}

#[test]
fn idx_dataset_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    let n = 40;
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let pixels: Vec<u8> = labels
        .iter()
        .flat_map(|&c| {
            (0..16)
                .map(|k| if (k < 8) == (c == 0) { 200 } else { 20 })
                .collect::<Vec<u8>>()
        })
        .map(|p| p.saturating_add(rng.below(30) as u8))
        .collect();
    fs::write(tmp.path().join("img.idx"), write_idx_images(n, 4, 4, &pixels)).unwrap();
    fs::write(tmp.path().join("lbl.idx"), write_idx_labels(&labels)).unwrap();
    let cfg = format!(
        "name = idx\ndataset = idx-images\ndataset.images = {}\ndataset.labels = {}\nhidden = 8\nepochs = 5\nsparsity = 2:4\n",
        tmp.path().join("img.idx").display(),
        tmp.path().join("lbl.idx").display()
    );
    fs::write(tmp.path().join("idx.txt"), cfg).unwrap();
    let out = sparq(tmp.path(), &["train", tmp.path().join("idx.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn pack_unpack_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let w = rand_matrix(&mut Rng::new(8), 16, 6, Distribution::Gaussian);
    let src = tmp.path().join("w.csv");
    let mut buf = Vec::new();
    w.write_csv(&mut buf).unwrap();
    fs::write(&src, buf).unwrap();

    let out = sparq(
        tmp.path(),
        &[
            "pack",
            src.to_str().unwrap(),
            "-o",
            "w.sqpk",
            "--sparsity",
            "2:8",
            "--bits",
            "4",
            "--scale",
            "0.25",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let packed = tmp.path().join("w.sqpk");
    let out = sparq(tmp.path(), &["unpack", packed.to_str().unwrap(), "-o", "back.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let back = Matrix::read_csv(fs::read_to_string(tmp.path().join("back.csv")).unwrap().as_bytes()).unwrap();
    let spec = SparsitySpec::two_eight();
    let expected = quantize(
        &sparsify(&w, &spec).unwrap().values,
        &QuantSpec::weight(4, 0.25).unwrap(),
    )
    .values;
    assert_eq!(back, expected);

    // A corrupted header is a data error.
    let mut bytes = fs::read(&packed).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.sqpk");
    fs::write(&bad, bytes).unwrap();
    let out = sparq(tmp.path(), &["unpack", bad.to_str().unwrap(), "-o", "x.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn metrics_of_identical_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let w = rand_matrix(&mut Rng::new(2), 8, 4, Distribution::Uniform);
    let p = tmp.path().join("w.mtrx");
    let mut buf = Vec::new();
    w.write_binary(&mut buf).unwrap();
    fs::write(&p, buf).unwrap();
    let out = sparq(tmp.path(), &["metrics", p.to_str().unwrap(), p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("weights,1.000000,0.000000,inf"), "{row}");
}

#[test]
fn bounds_then_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sparq(
        tmp.path(),
        &["bounds", "-o", "bounds.csv", "--count", "500", "--len", "16"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = tmp.path().join("bounds.csv");
    let out = sparq(
        tmp.path(),
        &["plot", csv.to_str().unwrap(), "--kind", "bound-gap", "-o", "gap.svg"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let svg = fs::read_to_string(tmp.path().join("gap.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);

    fs::write(tmp.path().join("empty.csv"), "theta,error_sq,lower,upper,gap\n").unwrap();
    let empty = tmp.path().join("empty.csv");
    let out = sparq(
        tmp.path(),
        &["plot", empty.to_str().unwrap(), "--kind", "bound-gap", "-o", "e.svg"],
    );
    assert_eq!(out.status.code(), Some(3));
}
