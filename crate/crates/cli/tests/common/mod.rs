#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use vinestress_cli::config::CONFIG_FILE;
use vinestress_cli::fixture::{ingest_fixture, write_fixture, Fixture, DEFAULT_SEED};
use vinestress_cli::store::{sha256_hex, Project};

pub const FULL_MODELS: &str = "[models]\nresponses = [\"berry_weight\", \"sugar\"]\npermutations = 100";
/// One response, one grid cell, no permutation test.
pub const LIGHT_MODELS: &str =
    "[models]\nresponses = [\"sugar\"]\npermutations = 0\nfolds = 4\ngrid_points = 30\nsigmas = [0.05]\nomegas = [0.95]";

pub fn project_with(dir: &Path, seed: u64, light: bool) -> (Project, Fixture) {
    let fx = write_fixture(dir, seed).expect("fixture written");
    if light {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(FULL_MODELS), "fixture models section changed");
        std::fs::write(&path, text.replace(FULL_MODELS, LIGHT_MODELS)).unwrap();
    }
    let project = Project::open(dir).expect("project opens");
    ingest_fixture(&project).expect("fixture ingests");
    (project, fx)
}

pub fn light_project(dir: &Path) -> (Project, Fixture) {
    project_with(dir, DEFAULT_SEED, true)
}

/// Hash of every file under the project except the raw inputs, keyed by
/// relative path.
pub fn digest(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == "raw" {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
