//! Artifact directory: per-stage subdirectories, `manifest.json`, lock file.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Discover,
    TrainFlow,
    BuildDict,
    BuildParallel,
    TrainGenerator,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Discover,
        Stage::TrainFlow,
        Stage::BuildDict,
        Stage::BuildParallel,
        Stage::TrainGenerator,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Discover => "discover",
            Stage::TrainFlow => "train-flow",
            Stage::BuildDict => "build-dict",
            Stage::BuildParallel => "build-parallel",
            Stage::TrainGenerator => "train-generator",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(format!("cannot open {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hash of a serializable value's JSON form. serde_json keeps struct field
/// order and `BTreeMap` order, so the encoding is stable.
pub fn config_hash(value: &impl Serialize) -> String {
    sha256_bytes(&serde_json::to_vec(value).expect("config serializes"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Logical input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the artifact root to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

/// Exclusive hold on an artifact directory; released on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct ArtifactStore {
    pub root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(format!("cannot create {}", self.root.display()), e))?;
        let path = self.root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Precondition(format!(
                "{} is locked by another run; remove {} if no stage is running",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(format!("cannot create {}", path.display()), e)),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn artifact(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    /// Path of an upstream artifact, or an error naming the stage that makes it.
    pub fn require(&self, stage: Stage, file: &str) -> Result<PathBuf> {
        let path = self.artifact(stage, file);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::Precondition(format!(
                "missing {}/{file}: run `fairflow {stage}` first",
                stage.name()
            )))
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.root.join(MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("corrupt {}: {e}", path.display())))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let path = self.root.join(MANIFEST);
        fairflow::checkpoint::write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, manifest)?;
            std::io::Write::write_all(w, b"\n")?;
            Ok(())
        })?;
        Ok(())
    }

    /// Hashes every file currently in the stage directory.
    pub fn hash_outputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let dir = self.stage_dir(stage);
        let mut out = BTreeMap::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        let entries = fs::read_dir(&dir).map_err(|e| CliError::io(format!("cannot list {}", dir.display()), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(format!("cannot list {}", dir.display()), e))?;
            if entry.path().is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                out.insert(format!("{}/{name}", stage.name()), sha256_file(&entry.path())?);
            }
        }
        Ok(out)
    }

    /// True when the recorded outputs are still on disk unchanged.
    pub fn outputs_intact(&self, record: &StageRecord) -> Result<bool> {
        for (rel, hash) in &record.outputs {
            let path = self.root.join(rel);
            if !path.is_file() || &sha256_file(&path)? != hash {
                return Ok(false);
            }
        }
        Ok(!record.outputs.is_empty())
    }

    /// Clears the stage directory so stale files never survive a rerun.
    pub fn reset_stage(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(format!("cannot clear {}", dir.display()), e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let held = store.lock().unwrap();
        assert!(matches!(store.lock(), Err(CliError::Precondition(_))));
        drop(held);
        assert!(store.lock().is_ok());
    }

    #[test]
    fn missing_artifact_names_its_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = ArtifactStore::new(dir.path()).require(Stage::BuildDict, "dictionary.tsv").unwrap_err();
        assert!(err.to_string().contains("fairflow build-dict"), "{err}");
    }

    #[test]
    fn outputs_are_hashed_by_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let d = store.reset_stage(Stage::Generate).unwrap();
        fs::write(d.join("x.txt"), b"abc").unwrap();
        let h = store.hash_outputs(Stage::Generate).unwrap();
        assert_eq!(h["generate/x.txt"], sha256_bytes(b"abc"));
        let rec = StageRecord { outputs: h, ..Default::default() };
        assert!(store.outputs_intact(&rec).unwrap());
        fs::write(d.join("x.txt"), b"abd").unwrap();
        assert!(!store.outputs_intact(&rec).unwrap());
    }
}
