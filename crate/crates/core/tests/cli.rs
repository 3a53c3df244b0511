use std::fs;
use std::path::Path;
use std::process::Command;

use grugraph::cli::{DataSource, ExperimentReport, RunConfig};
use grugraph::graph::{self, SynthConfig};
use grugraph::regularizers::Method;

const SMALL: &str = "\
# tiny run
synth.nodes_per_type = 40, 30, 30
synth.feature_dim = 8
epochs = 15
lr = 0.01
hidden_dim = 8
layers = 2
eval_every = 5
regularizer.method = grug
regularizer.alpha = 0.05
regularizer.beta = 0.01
sweep.values = 1, 2
sweep.methods = clean, grug
sweep.repeats = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grugraph"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn config_round_trips_through_its_text_form() {
    let cfg = RunConfig::parse_str(SMALL, Path::new(".")).unwrap();
    assert_eq!(cfg.train.regularizer.method, Method::Grug);
    assert_eq!(cfg.train.epochs, 15);
    assert_eq!(cfg.sweep.repeats, 2);
    match &cfg.data {
        DataSource::Synthetic(s) => assert_eq!(s.nodes_per_type, vec![40, 30, 30]),
        other => panic!("{other:?}"),
    }
    let again = RunConfig::parse_str(&cfg.to_text(), Path::new(".")).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn config_errors_name_the_key() {
    let cases = [
        ("epoch = 3\n", "epoch"),
        ("lr = 0.1\nlr = 0.2\n", "lr"),
        ("lr = fast\n", "lr"),
        ("regularizer.method = grugg\n", "regularizer.method"),
        ("attack.ratio = 1.5\n", "attack.ratio"),
        ("sweep.repeats = 0\n", "sweep.repeats"),
        ("best_valid = yes\n", "best_valid"),
        ("data.nodes = missing.tsv\n", "data."),
    ];
    for (text, key) in cases {
        let err = RunConfig::parse_str(text, Path::new("/nonexistent")).unwrap_err().to_string();
        assert!(err.contains(key), "{text:?} gave {err}");
    }
    assert!(RunConfig::parse_str("no equals sign\n", Path::new(".")).is_err());
}

#[test]
fn data_paths_resolve_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let g = graph::synth_graph(&SynthConfig { nodes_per_type: vec![20, 10, 10], ..SynthConfig::default() }).unwrap();
    let files = g.write_to_dir(dir.path()).unwrap();
    let rel = |p: &Path| p.file_name().unwrap().to_str().unwrap().to_string();
    let text = format!(
        "data.nodes = {}\ndata.edges = {}\ndata.features = {}\ndata.labels = {}\n",
        rel(&files.nodes),
        rel(&files.edges),
        rel(&files.features),
        rel(files.labels.as_ref().unwrap())
    );
    let cfg = RunConfig::parse_file(&write_config(dir.path(), &text)).unwrap();
    assert_eq!(cfg.load_graph().unwrap(), g);
    let mixed = format!("{text}synth.seed = 3\n");
    assert!(RunConfig::parse_str(&mixed, dir.path()).is_err());
}

#[test]
fn train_is_byte_reproducible_and_honors_the_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |out: &str, seed: Option<&str>| {
        let mut c = bin();
        c.arg("train").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join(out));
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        let status = c.status().unwrap();
        assert!(status.success());
        fs::read(dir.path().join(out).join("trace.csv")).unwrap()
    };
    let a = run("a", None);
    let b = run("b", None);
    let c = run("c", Some("99"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,valid_loss,valid_metric,grad_l1,grad_l2");
    assert_eq!(lines.clone().count(), 15);
    assert!(lines.next().unwrap().contains(",NA,NA,"));

    let report = ExperimentReport::read(&dir.path().join("c")).unwrap();
    assert_eq!(report.seed, 99);
    assert_eq!(report.command, "train");
    assert_eq!(report.trace.len(), 15);
    let summary = bin().args(["report", "--from"]).arg(dir.path().join("c")).output().unwrap();
    assert!(summary.status.success());
    assert!(!summary.stdout.is_empty());
}

#[test]
fn sweep_and_attack_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sweep");
    let status = bin().args(["sweep", "--axis", "depth", "--jobs", "2", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    assert!(csv.starts_with("axis,value,method,repeat,metric,epochs_to_threshold,macro_f1"));

    let out = dir.path().join("attack");
    let status = bin().args(["attack", "--ratio", "0.3", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    assert_eq!(ExperimentReport::read(&out).unwrap().attack_ratio, Some(0.3));
}

#[test]
fn failures_exit_nonzero_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = bin().args(["train", "--config", "/no/such/file.cfg", "--out"]).arg(&out).output().unwrap();
    assert!(!missing.status.success());
    assert!(!String::from_utf8_lossy(&missing.stderr).is_empty());
    let cfg = write_config(dir.path(), "regularizer.alpha = -1\n");
    assert!(!bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&out).status().unwrap().success());
    assert!(!out.join("trace.csv").exists());
    assert!(!bin().arg("sweep").arg("--out").arg(&out).status().unwrap().success());
}

#[test]
fn verify_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().arg("verify").arg("--out").arg(dir.path()).status().unwrap();
    assert!(status.success());
    let report = ExperimentReport::read(dir.path()).unwrap();
    assert!(!report.verification.is_empty());
    assert!(report.verification.iter().all(|c| c.passed));
}
