use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn artcontext(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artcontext"))
        .arg("--config")
        .arg(fixtures().join("pipeline.toml"))
        .arg("--out-root")
        .arg(out_root)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_names_formats() {
    let o = Command::new(env!("CARGO_BIN_EXE_artcontext")).arg("--version").output().unwrap();
    assert_eq!(code(&o), 0);
    let v = String::from_utf8(o.stdout).unwrap();
    assert!(v.starts_with("artcontext 0.1.0"), "{v}");
    assert!(v.contains("emb format 1") && v.contains("lora format 1"), "{v}");
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&artcontext(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&artcontext(dir.path(), &["harvest", "--rho=-1"])), 1);
}

#[test]
fn run_then_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let o = artcontext(dir.path(), &["run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for stage in ["harvest", "extract", "embed", "align", "features", "train", "eval"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{stage}: "))), "{out}");
    }
    assert!(dir.path().join("eval/report.json").is_file());

    let o = artcontext(dir.path(), &["retrieve", "--qid", "QF10", "-k", "1", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hits: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(hits[0]["context_id"], "W303#0");

    let o = artcontext(dir.path(), &["retrieve", "--qid", "QF10", "-k", "3", "--mode", "clip", "--adapted"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = artcontext(dir.path(), &["retrieve", "--qid", "Q404", "-k", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Q404"));
}

#[test]
fn stale_input_exits_1_and_force_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&artcontext(dir.path(), &["extract"])), 1);
    assert_eq!(code(&artcontext(dir.path(), &["harvest"])), 0);
    assert_eq!(code(&artcontext(dir.path(), &["extract"])), 0);
    let works = dir.path().join("harvest/works.jsonl");
    let mut text = fs::read_to_string(&works).unwrap();
    text.push('\n');
    fs::write(&works, text).unwrap();
    let o = artcontext(dir.path(), &["extract"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(code(&artcontext(dir.path(), &["--force", "extract"])), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("extract/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["forced"], true);
}

#[test]
fn stage_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&artcontext(dir.path(), &["run"])), 0);
    let o = artcontext(dir.path(), &["train", "--batch", "100"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn io_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "").unwrap();
    assert_eq!(code(&artcontext(&file.join("below"), &["harvest"])), 3);
}

#[test]
fn standalone_eval_from_score_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&artcontext(dir.path(), &["run"])), 0);
    let eval = dir.path().join("eval");
    let csv = dir.path().join("standalone.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_artcontext"))
        .arg("eval")
        .arg("--queries")
        .arg(fixtures().join("eval.jsonl"))
        .arg("--baseline-scores")
        .arg(eval.join("baseline_scores.emb"))
        .arg("--adapted-scores")
        .arg(eval.join("adapted_scores.emb"))
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 102);
    assert_eq!(text, fs::read_to_string(eval.join("pr.csv")).unwrap());
}
