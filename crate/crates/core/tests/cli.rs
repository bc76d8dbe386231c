use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn uxmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uxmil")).args(args).env_remove("UXMIL_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset shared by the tests in this file.
fn dataset() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("synth.json");
        std::fs::write(&cfg, r#"{"synth": {"min_duration_seconds": 30, "max_duration_seconds": 34}}"#).unwrap();
        let o = uxmil(&[
            "--config", s(&cfg), "synth", "--out", s(&dir.path().join("data")),
            "--subjects", "4", "--episodes-per-subject", "2", "--frame-size", "16",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dir
    })
    .path()
}

fn train(out: &Path, threads: &str) -> Output {
    let manifest = dataset().join("data/manifest.json");
    uxmil(&[
        "train", "--manifest", s(&manifest), "--out", s(out), "--profile", "toy",
        "--epochs", "2", "--folds", "2", "--threads", threads, "--seed", "3",
    ])
}

#[test]
fn help_and_version_succeed_usage_errors_fail() {
    assert_eq!(code(&uxmil(&["--help"])), 0);
    let v = uxmil(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("uxmil "));
    assert_eq!(code(&uxmil(&[])), 1);
    assert_eq!(code(&uxmil(&["frobnicate"])), 1);
    assert_eq!(code(&uxmil(&["train", "--epochs", "many"])), 1);
}

#[test]
fn gradcheck_passes_and_records_its_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = uxmil(&["gradcheck", "--depth", "ops", "--out", s(dir.path()), "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let resolved: serde_json::Value = serde_json::from_str(&text(&dir.path().join("resolved_config.json"))).unwrap();
    assert_eq!(resolved["command"], "gradcheck");
    assert_eq!(resolved["config"]["seed"], 7);
    assert!(resolved["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    let log = text(&dir.path().join("run.log"));
    assert!(log.contains("seed 7") && log.contains(env!("CARGO_PKG_VERSION")), "{log}");
}

#[test]
fn gradcheck_with_injected_fault_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = uxmil(&["gradcheck", "--depth", "ops", "--inject-fault", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL ops.fault.square"));
}

#[test]
fn synth_writes_layout_and_passes_separability() {
    let data = dataset().join("data");
    for f in ["manifest.json", "truth.csv", "separability.json", "resolved_config.json", "run.log", "s01_e01/audio.wav"] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert!(data.join("s04_e02/frames/f_00000.png").exists());
    let sep: serde_json::Value = serde_json::from_str(&text(&data.join("separability.json"))).unwrap();
    assert_eq!(sep["accuracy"], 1.0);
    assert!(text(&data.join("truth.csv")).starts_with("episode_id,cue_clips,cue_columns,s,label\n"));
}

#[test]
fn undetectable_cues_fail_verification_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"synth": {"min_duration_seconds": 30, "max_duration_seconds": 30, "blob_intensity": 0.7}}"#).unwrap();
    let o = uxmil(&[
        "--config", s(&cfg), "synth", "--out", s(&dir.path().join("d")), "--subjects", "4",
        "--episodes-per-subject", "2", "--frame-size", "16", "--cue-channels", "vision",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_attend_inspect_workflow() {
    let out = tempfile::tempdir().unwrap();
    let run1 = out.path().join("a");
    let o = train(&run1, "1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "metrics.csv", "predictions.csv", "fold1.uxw", "fold1.json", "fold2.uxw", "resolved_config.json", "run.log"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let metrics = text(&run1.join("metrics.csv"));
    assert!(metrics.starts_with("fold,acc7,acc3,n_test\n1,"));
    assert!(metrics.lines().last().unwrap().starts_with("mean,"));
    assert!(text(&run1.join("predictions.csv")).starts_with("episode_id,true,pred,pred3,true3\n"));

    let run2 = out.path().join("b");
    assert_eq!(code(&train(&run2, "1")), 0);
    assert_eq!(text(&run1.join("metrics.csv")), text(&run2.join("metrics.csv")));
    assert_eq!(text(&run1.join("predictions.csv")), text(&run2.join("predictions.csv")));
    let run4 = out.path().join("c");
    assert_eq!(code(&train(&run4, "4")), 0);
    assert_eq!(text(&run1.join("metrics.csv")), text(&run4.join("metrics.csv")));

    let manifest = dataset().join("data/manifest.json");
    let weights = run1.join("fold1.uxw");
    let att = out.path().join("att");
    let o = uxmil(&["attend", "--weights", s(&weights), "--manifest", s(&manifest), "--episode", "s02_e01", "--out", s(&att)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = text(&att.join("attention.csv"));
    assert!(csv.starts_with("episode_id,modality,instance_index,score\n"));
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    for m in ["audio", "vision"] {
        assert!(text(&att.join(format!("s02_e01_{m}.svg"))).contains("<svg"));
    }
    let all = out.path().join("all");
    assert_eq!(code(&uxmil(&["attend", "--weights", s(&weights), "--manifest", s(&manifest), "--episode", "all", "--out", s(&all)])), 0);
    assert!(all.join("s04_e02/attention.csv").exists());
    let o = uxmil(&["attend", "--weights", s(&weights), "--manifest", s(&manifest), "--episode", "nope", "--out", s(&all)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    let insp = out.path().join("insp");
    let o = uxmil(&["inspect", s(&weights), "--out", s(&insp)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("audio.cls"));
    assert_eq!(code(&uxmil(&["inspect", s(&run1.join("report.json")), "--out", s(&insp)])), 0);
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing: PathBuf = dir.path().join("none.json");
    assert_eq!(code(&uxmil(&["train", "--manifest", s(&missing), "--out", s(dir.path())])), 1);
    assert_eq!(code(&uxmil(&["train", "--out", s(dir.path())])), 1);
    assert_eq!(code(&uxmil(&["--config", s(&missing), "gradcheck"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = uxmil(&["--config", s(&bad), "gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}
