use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prunetax_core::checkpoint;
use prunetax_core::data::Dataset;
use prunetax_core::network::{LayerSpec, LossKind, NetworkGraph};

fn prunetax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunetax")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = prunetax(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = prunetax(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        "model = \"lenet5-like\"\ndataset = \"train.prnd\"\ntest_dataset = \"test.prnd\"\nseed = 3\nout_dir = \"out\"\n\
         [train]\nsteps = 300\nbatch_size = 32\nlearning_rate = 0.01\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Separable data, a config and a trained checkpoint in `dir`.
fn trained_setup(dir: &Path, harness: &str) -> PathBuf {
    ok(&["make-dataset", "--kind", "separable", "--count", "600", "--seed", "1", "--out", s(&dir.join("train.prnd"))]);
    ok(&["make-dataset", "--kind", "separable", "--count", "200", "--seed", "2", "--out", s(&dir.join("test.prnd"))]);
    let cfg = write_config(dir, harness);
    ok(&["train", "--config", s(&cfg)]);
    cfg
}

fn accuracy_line(stdout: &str, label: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or_else(|| panic!("no {label:?} line in {stdout}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn list_signals_is_complete_and_stable() {
    let a = ok(&["list-signals"]);
    let b = ok(&["list-signals"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(*lines.last().unwrap(), "total 430");
    assert_eq!(lines.len(), 431);
    assert!(ok(&["list-signals", "--rules", "none"]).ends_with("total 480\n"));
    let published = ok(&["list-signals", "--published"]);
    assert_eq!(published.lines().count(), 8);
    assert!(published.contains("APoZ\tactivations.indicator_positive.sum.cardinality"));
}

#[test]
fn training_is_accurate_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "make-dataset",
        "--kind",
        "separable",
        "--count",
        "600",
        "--seed",
        "1",
        "--out",
        s(&dir.path().join("train.prnd")),
    ]);
    ok(&[
        "make-dataset",
        "--kind",
        "separable",
        "--count",
        "200",
        "--seed",
        "2",
        "--out",
        s(&dir.path().join("test.prnd")),
    ]);
    let cfg = write_config(dir.path(), "");
    let first = ok(&["train", "--config", s(&cfg)]);
    assert!(accuracy_line(&first, "train accuracy") >= 0.99, "{first}");
    let ckpt = dir.path().join("out/model.prnw");
    let bytes = std::fs::read(&ckpt).unwrap();
    ok(&["train", "--config", s(&cfg), "--threads", "2"]);
    assert_eq!(bytes, std::fs::read(&ckpt).unwrap());
}

#[test]
fn zero_drop_budget_stops_after_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = NetworkGraph::new(
        [2, 1, 1],
        &[LayerSpec::conv(2, 2, 1, 1, 0), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(2, 3)],
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    net.weight_mut(0).unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    net.weight_mut(3).unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    net.bias_mut(3).unwrap().data_mut().copy_from_slice(&[-0.5, -0.5, 0.0]);
    let ckpt = dir.path().join("fragile.prnw");
    checkpoint::save(&net, &ckpt).unwrap();
    let images: Vec<f32> = (0..40).flat_map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
    let data = Dataset::new([2, 1, 1], 3, images, labels).unwrap();
    data.write(&dir.path().join("train.prnd")).unwrap();
    data.write(&dir.path().join("test.prnd")).unwrap();
    let cfg = write_config(dir.path(), "[harness]\nstop_test_acc_drop = 0.0\n");
    ok(&["prune", "--config", s(&cfg), "--signal", "L1-norm of weights", "--retrain", "off", "--checkpoint", s(&ckpt)]);
    let csv = std::fs::read_to_string(dir.path().join("out/prune/weights.value.l1.none.retrain-off.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().contains(",1.000000,1.000000,"));
}

#[test]
fn unknown_signal_suggests_alternatives() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let err = fail(&["prune", "--config", s(&cfg), "--signal", "weights.value.l1.nonee"]);
    assert!(err.contains("weights.value.l1.none"), "{err}");
    let err = fail(&["prune", "--config", s(&cfg), "--signal", "APoz2"]);
    assert!(err.contains("APoZ"), "{err}");
}

#[test]
fn malformed_dataset_reports_the_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("train.prnd");
    ok(&["make-dataset", "--kind", "separable", "--count", "10", "--out", s(&good)]);
    let mut bytes = std::fs::read(&good).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&good, &bytes).unwrap();
    std::fs::copy(&good, dir.path().join("test.prnd")).unwrap();
    let cfg = write_config(dir.path(), "");
    let err = fail(&["train", "--config", s(&cfg)]);
    assert!(err.contains(&format!("at byte {}", bytes.len())), "{err}");
    assert!(err.contains("train.prnd"), "{err}");
}

#[test]
fn prune_and_sweep_agree_and_analyses_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        trained_setup(dir.path(), "[harness]\nmax_retrain_steps_per_iteration = 5\neval_batches_for_saliency = 2\n");
    let sum = "activations.taylor1.sum.none";
    let sos = "activations.taylor1.sum_of_squares.none";
    let ckpt = dir.path().join("out/model.prnw");
    let prune = |tag: &str| {
        let out = dir.path().join(tag);
        ok(&[
            "prune",
            "--config",
            s(&cfg),
            "--signal",
            sum,
            "--retrain",
            "on",
            "--out-dir",
            s(&out),
            "--checkpoint",
            s(&ckpt),
        ]);
        std::fs::read(dir.path().join(tag).join(format!("prune/{sum}.retrain-on.csv"))).unwrap()
    };
    let a = prune("p1");
    assert_eq!(a, prune("p2"));

    ok(&["sweep", "--config", s(&cfg), "--signals", &format!("{sum},{sos}")]);
    let sweep = dir.path().join("out/sweep");
    assert_eq!(std::fs::read(sweep.join(format!("retrain-on/{sum}.csv"))).unwrap(), a);
    for mode in ["retrain-on", "retrain-off"] {
        let summary = std::fs::read_to_string(sweep.join(mode).join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3, "{summary}");
    }

    ok(&["compare-reductions", "--sweep-dir", s(&sweep)]);
    let means = std::fs::read_to_string(sweep.join("retrain-on/reduction_means.csv")).unwrap();
    assert!(means.starts_with("reduction,pairs,mean_improvement\nsum_of_squares,1,"), "{means}");

    let report = ok(&["retrain-report", "--sweep-dir", s(&sweep)]);
    assert_eq!(report.lines().count(), 3, "{report}");
    let empty = ok(&["retrain-report", "--sweep-dir", s(&sweep), "--min-sparsity", "1.01"]);
    assert_eq!(empty.lines().count(), 1, "{empty}");

    let front = ok(&["pareto", "--summary", s(&sweep.join("retrain-on/summary.csv"))]);
    assert!(front.lines().count() >= 2, "{front}");
}

#[test]
fn pareto_keeps_non_dominated_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.csv");
    std::fs::write(&path, "name,x,y\na,0.1,0.9\nb,0.2,0.8\nc,0.15,0.7\nd,0.2,0.85\n").unwrap();
    let out = ok(&["pareto", "--summary", s(&path), "--x-col", "x", "--y-col", "y"]);
    assert_eq!(out, "name,x,y\na,0.1,0.9\nd,0.2,0.85\n");
    let err = fail(&["pareto", "--summary", s(&path), "--x-col", "z", "--y-col", "y"]);
    assert!(err.contains('z'), "{err}");
}
