use std::path::Path;
use std::process::{Command, Output};

use featsteer::subject::{read_jsonl, Behavior, Split};
use featsteer_cli::manifest::{file_sha256, RunManifest};

const FAST: &str = "\
[data]
n_pos = 40
n_neg = 40
n_test_pos = 10
n_test_neg = 40

[train]
steps = 200
batch = 8

[eval]
grad_check_probes = 20
";

fn featsteer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featsteer"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = featsteer(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn with_config(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), text).unwrap();
    dir
}

#[test]
fn generate_writes_subject_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate"]);
    let out = dir.path().join("out");
    let d = read_jsonl(&out.join("dataset.jsonl")).unwrap();
    assert_eq!(d.select(Behavior::Comply, Split::Train).len(), 100);
    assert_eq!(d.select(Behavior::Refuse, Split::Train).len(), 100);
    let m = RunManifest::read(&out, "generate").unwrap();
    assert_eq!(m.seed, 7);
    assert!(m.artifacts.contains_key("subject.json") && m.artifacts.contains_key("dataset.jsonl"));
    assert!(m.artifacts_intact(&out));
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["generate", "--seed", "11"]);
    ok(b.path(), &["generate", "--seed", "11"]);
    for f in ["subject.json", "dataset.jsonl"] {
        assert_eq!(
            file_sha256(&a.path().join("out").join(f)).unwrap(),
            file_sha256(&b.path().join("out").join(f)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["generate", "--seed", "12"]);
    assert_ne!(
        file_sha256(&a.path().join("out/dataset.jsonl")).unwrap(),
        file_sha256(&c.path().join("out/dataset.jsonl")).unwrap()
    );
}

#[test]
fn invalid_config_exits_with_code_two_and_names_the_field() {
    let dir = with_config("[data]\nn_neg = 0\n");
    let o = featsteer(dir.path(), &["generate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_neg"));

    let dir = with_config("[subject]\ndim = 4\n");
    let o = featsteer(dir.path(), &["generate", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dim"));

    let o = featsteer(dir.path(), &["train", "--tau", "0.2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = featsteer(dir.path(), &["sweep", "--layer", "6"]);
    assert_eq!(o.status.code(), Some(2));
    let o = featsteer(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_without_supervision_exits_with_code_three() {
    // the last position of the last layer has nothing downstream
    let dir = with_config("[train]\nsteps = 5\n[train.site]\nlayer = 5\nposition = -1\npoint = \"block_output\"\n");
    let o = featsteer(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_report_pipeline() {
    let dir = with_config(FAST);
    let stdout = ok(dir.path(), &["train", "--grad-check", "--config", "run.toml"]);
    assert!(stdout.contains("gradient check"));
    let out = dir.path().join("out");
    let report: featsteer::train::TrainReport = featsteer::container::load(&out.join("train_report.json")).unwrap();
    let gc = report.grad_check.clone().unwrap();
    assert!(gc.max_relative_error <= 1e-3, "{gc:?}");
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&report.loss[report.loss.len() - 20..]) < mean(&report.loss[..20]));
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 201);

    ok(dir.path(), &["eval", "--config", "run.toml"]);
    let metrics: featsteer_cli::commands::Metrics =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let names: Vec<&str> = metrics.methods.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(
        names,
        ["none", "dim-ablate", "dim-actadd", "linear-at-loss-sites", "linear-fmap", "nonlinear-clamp"]
    );
    assert_eq!(metrics.get("none").unwrap().compliance, 0.0);
    let clamp = metrics.get("nonlinear-clamp").unwrap();
    assert!(clamp.magnitude.sites_per_example.iter().all(|&n| n == 1));
    // eval reused the trained map rather than retraining
    let train_manifest = RunManifest::read(&out, "train").unwrap();
    assert_eq!(
        train_manifest.artifacts["steering.json"].sha256,
        file_sha256(&out.join("steering.json")).unwrap()
    );

    let md = ok(dir.path(), &["report", "--config", "run.toml"]);
    assert!(md.contains("| nonlinear-clamp |"));
    assert!(out.join("report.md").exists());
    assert!(RunManifest::read(&out, "report").is_some());
}

#[test]
fn sweep_is_reproducible_and_records_its_peak() {
    let text = format!("{FAST}sweep_layers = [0, 2, 4]\n").replace("steps = 200", "steps = 20");
    let a = with_config(&text);
    let b = with_config(&text);
    ok(a.path(), &["sweep", "--config", "run.toml", "--threads", "1"]);
    ok(b.path(), &["sweep", "--config", "run.toml", "--threads", "1"]);
    let csv = std::fs::read_to_string(a.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.path().join("out/sweep.csv")).unwrap());
    assert_eq!(csv.lines().count(), 4);
    let m = RunManifest::read(&a.path().join("out"), "sweep").unwrap();
    assert!(m.peak_layer.is_some_and(|l| [0, 2, 4].contains(&l)));
}

#[test]
fn gradcheck_command_passes() {
    let dir = with_config(FAST);
    ok(dir.path(), &["gradcheck", "--config", "run.toml"]);
    let g: featsteer_cli::commands::GradCheckOutput =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/gradcheck.json")).unwrap()).unwrap();
    assert!(g.passed && g.probes == 20);
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = featsteer(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"seed": 3, "data": {"n_pos": 5, "n_neg": 5, "n_test_pos": 1, "n_test_neg": 2}}"#).unwrap();
    ok(dir.path(), &["generate", "--config", "run.json"]);
    let d = read_jsonl(&dir.path().join("out/dataset.jsonl")).unwrap();
    assert_eq!(d.examples.len(), 13);
}
