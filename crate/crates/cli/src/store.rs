//! Artifact store: a directory of CSV/JSON files plus `manifest.json`,
//! which records for every artifact its content hash and the hashes of the
//! inputs it was computed from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vinestress::knowledge::{load_kb, KnowledgeBase, DEFAULT_KNOWLEDGE};

use crate::config::{ProjectConfig, CONFIG_FILE};
use crate::error::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Input key prefix for files outside the store (raw ingested sources).
pub const SOURCE_PREFIX: &str = "source:";
const SHIPPED_KNOWLEDGE: &str = "<shipped knowledge base>";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    pub sha256: String,
    /// input key -> content hash at computation time
    pub inputs: BTreeMap<String, String>,
}

/// An opened project: configuration, knowledge base and artifact store.
#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    pub config: ProjectConfig,
    pub kb: KnowledgeBase,
    config_hash: String,
    knowledge_key: String,
    knowledge_hash: String,
    manifest: Mutex<Manifest>,
}

impl Project {
    pub fn open(root: impl Into<PathBuf>) -> Result<Project, PipelineError> {
        let root = root.into();
        let (config, text) = ProjectConfig::load(&root)?;
        let (kb, knowledge_key, knowledge_hash) = match &config.knowledge {
            Some(rel) => {
                let doc = std::fs::read_to_string(root.join(rel))
                    .map_err(|e| PipelineError::Validation(format!("knowledge file {rel}: {e}")))?;
                let kb = load_kb(&doc).map_err(|e| PipelineError::Validation(format!("knowledge file {rel}: {e}")))?;
                (kb, rel.clone(), sha256_hex(doc.as_bytes()))
            }
            None => (
                KnowledgeBase::shipped_default(),
                SHIPPED_KNOWLEDGE.to_string(),
                sha256_hex(DEFAULT_KNOWLEDGE.as_bytes()),
            ),
        };
        let manifest = match std::fs::read(root.join(MANIFEST_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Validation(format!("{MANIFEST_FILE}: {e}")))?,
            Err(_) => Manifest::default(),
        };
        Ok(Project {
            root,
            config,
            kb,
            config_hash: sha256_hex(text.as_bytes()),
            knowledge_key,
            knowledge_hash,
            manifest: Mutex::new(manifest),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    /// Current hash of an input key: config, knowledge base, store file or
    /// external source. `None` when the file is gone.
    pub fn input_hash(&self, key: &str) -> Option<String> {
        if key == CONFIG_FILE {
            return Some(self.config_hash.clone());
        }
        if key == self.knowledge_key {
            return Some(self.knowledge_hash.clone());
        }
        let path = match key.strip_prefix(SOURCE_PREFIX) {
            Some(src) => self.resolve_source(src),
            None => self.path(key),
        };
        std::fs::read(path).ok().map(|b| sha256_hex(&b))
    }

    /// Key under which the knowledge base is recorded as an input.
    pub fn knowledge_key(&self) -> &str {
        &self.knowledge_key
    }

    /// Paths inside the project are recorded relative to it so manifests do
    /// not depend on where the project lives.
    pub fn source_key(&self, path: &Path) -> String {
        let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        let root = std::fs::canonicalize(&self.root).unwrap_or_else(|_| self.root.clone());
        let shown = abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(abs);
        format!("{SOURCE_PREFIX}{}", shown.to_string_lossy().replace('\\', "/"))
    }

    fn resolve_source(&self, src: &str) -> PathBuf {
        let p = Path::new(src);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Write an artifact and record it with the current hashes of `inputs`.
    pub fn write(&self, rel: &str, bytes: &[u8], stage: &str, inputs: &[String]) -> Result<String, PipelineError> {
        let mut recorded = BTreeMap::new();
        for key in inputs {
            let h = self
                .input_hash(key)
                .ok_or_else(|| PipelineError::NotFound(format!("input {key} of {rel}")))?;
            recorded.insert(key.clone(), h);
        }
        self.write_raw(rel, bytes)?;
        let sha = sha256_hex(bytes);
        self.manifest.lock().expect("manifest lock").artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                stage: stage.to_string(),
                sha256: sha.clone(),
                inputs: recorded,
            },
        );
        Ok(sha)
    }

    /// Write a file without manifest bookkeeping.
    pub fn write_raw(&self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(PipelineError::io(format!("creating {}", dir.display())))?;
        }
        // write-then-rename so readers never observe a partial file
        let tmp = path.with_extension("tmp~");
        std::fs::write(&tmp, bytes).map_err(PipelineError::io(format!("writing {}", tmp.display())))?;
        std::fs::rename(&tmp, &path).map_err(PipelineError::io(format!("writing {}", path.display())))
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &self,
        rel: &str,
        value: &T,
        stage: &str,
        inputs: &[String],
    ) -> Result<String, PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Internal(e.to_string()))?;
        bytes.push(b'\n');
        self.write(rel, &bytes, stage, inputs)
    }

    pub fn write_csv<T: Serialize>(
        &self,
        rel: &str,
        rows: &[T],
        stage: &str,
        inputs: &[String],
    ) -> Result<String, PipelineError> {
        self.write(rel, &to_csv(rows)?, stage, inputs)
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, PipelineError> {
        std::fs::read(self.path(rel)).map_err(|_| PipelineError::NotFound(rel.to_string()))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, PipelineError> {
        serde_json::from_slice(&self.read(rel)?).map_err(|e| PipelineError::Validation(format!("{rel}: {e}")))
    }

    pub fn read_csv<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, PipelineError> {
        from_csv(&self.read(rel)?).map_err(|e| PipelineError::Validation(format!("{rel}: {e}")))
    }

    pub fn save_manifest(&self) -> Result<(), PipelineError> {
        let m = self.manifest();
        let mut bytes = serde_json::to_vec_pretty(&m).map_err(|e| PipelineError::Internal(e.to_string()))?;
        bytes.push(b'\n');
        self.write_raw(MANIFEST_FILE, &bytes)
    }

    /// Artifacts whose content or inputs changed since they were written.
    /// `only` restricts the check to the given artifacts.
    pub fn stale(&self, only: Option<&[String]>) -> Vec<String> {
        let m = self.manifest();
        let mut out = Vec::new();
        for (rel, entry) in &m.artifacts {
            if let Some(only) = only {
                if !only.contains(rel) {
                    continue;
                }
            }
            match std::fs::read(self.path(rel)) {
                Err(_) => out.push(format!("{rel} is missing")),
                Ok(bytes) if sha256_hex(&bytes) != entry.sha256 => {
                    out.push(format!("{rel} was modified after it was written"))
                }
                Ok(_) => {}
            }
            for (key, h) in &entry.inputs {
                match self.input_hash(key) {
                    Some(cur) if &cur == h => {}
                    // a removed external source leaves the ingested copy authoritative
                    None if key.starts_with(SOURCE_PREFIX) => {}
                    Some(_) if key.starts_with(SOURCE_PREFIX) => out.push(format!(
                        "{rel}: source {} changed, re-ingest it",
                        &key[SOURCE_PREFIX.len()..]
                    )),
                    _ => out.push(format!("{rel}: input {key} changed")),
                }
            }
        }
        out
    }

    /// Fail with the list of stale artifacts among `rels`.
    pub fn require_fresh(&self, rels: &[String]) -> Result<(), PipelineError> {
        let stale = self.stale(Some(rels));
        if stale.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Stale(stale))
        }
    }

    /// Hash summarizing a set of inputs, used in stage error messages.
    pub fn inputs_digest(&self, inputs: &[String]) -> String {
        let joined: String = inputs
            .iter()
            .map(|k| format!("{k}={};", self.input_hash(k).unwrap_or_default()))
            .collect();
        sha256_hex(joined.as_bytes())[..16].to_string()
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| PipelineError::Internal(e.to_string()))
}

pub fn from_csv<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}
