mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::light_project;

fn vinestress(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinestress"))
        .arg("--project")
        .arg(project)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn pending_run_exits_with_two_and_select_unblocks_it() {
    let dir = tempfile::tempdir().unwrap();
    let (p, fx) = light_project(dir.path());
    drop(p);
    let out = vinestress(dir.path(), &["run", "--mode", "pending"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("awaiting selection"));
    for t in &fx.truths {
        let tr = t.treatment.to_string();
        let out = vinestress(dir.path(), &["select", "--plot", &t.plot_id, "--treatment", &tr, "--index", "2", "--author", "ana"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let again = vinestress(dir.path(), &["select", "--plot", "RIE-SY", "--treatment", "i0", "--index", "3", "--author", "ben"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("force"));
    let out = vinestress(dir.path(), &["run", "--mode", "pending"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("derived/report.md").is_file());
}

#[test]
fn candidates_verb_lists_numbered_dates() {
    let dir = tempfile::tempdir().unwrap();
    light_project(dir.path());
    let out = vinestress(dir.path(), &["candidates", "--plot", "PIC-GR", "--treatment", "i1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("PIC-GR/i1: "), "{text}");
    assert!(text.lines().nth(1).unwrap().trim_start().starts_with("1  2012-"), "{text}");
}

#[test]
fn unknown_plot_and_missing_project_fail_with_one() {
    let dir = tempfile::tempdir().unwrap();
    light_project(dir.path());
    let out = vinestress(dir.path(), &["candidates", "--plot", "NOPE"]);
    assert_eq!(out.status.code(), Some(1));
    let empty = tempfile::tempdir().unwrap();
    let out = vinestress(empty.path(), &["run"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixture_verb_writes_an_ingested_project() {
    let dir = tempfile::tempdir().unwrap();
    let out = vinestress(dir.path(), &["fixture", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("vinestress.toml").is_file());
    assert!(dir.path().join("manifest.json").is_file());
    assert!(dir.path().join("data/lwp.csv").is_file());
}
