//! Run manifests: one JSON record per CLI invocation, written next to its
//! outputs, listing resolved settings and SHA-256 hashes of every artifact
//! read or written. Consumers look up an input's producing manifest and
//! refuse the file when its hash no longer matches.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

impl ArtifactRef {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(ArtifactRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field that differs between
    /// otherwise identical runs.
    pub created_unix: u64,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Validates `path` against its producer (if any) and records it.
    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let r = verify_artifact(path)?;
        self.inputs.push(r);
        Ok(())
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(ArtifactRef::of(path)?);
        Ok(())
    }

    pub fn file_name(&self) -> String {
        format!("{}{MANIFEST_SUFFIX}", self.subcommand)
    }

    /// Writes `<dir>/<subcommand>.manifest.json` and returns its path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(self.file_name());
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Pretty JSON with `created_unix` zeroed, for reproducibility checks.
    pub fn without_timestamp(&self) -> Result<String> {
        let mut m = self.clone();
        m.created_unix = 0;
        Ok(serde_json::to_string_pretty(&m)?)
    }
}

fn same_file(recorded: &str, actual: &Path) -> bool {
    let recorded = Path::new(recorded);
    if recorded.file_name() != actual.file_name() {
        return false;
    }
    match (fs::canonicalize(recorded), fs::canonicalize(actual)) {
        (Ok(a), Ok(b)) => a == b,
        // Recorded relative to another working directory: the file name and
        // directory of the manifest are the remaining evidence.
        _ => true,
    }
}

/// Hashes `path` and, when a manifest in the same directory lists it as an
/// output, checks the hash against that record.
pub fn verify_artifact(path: impl AsRef<Path>) -> Result<ArtifactRef> {
    let path = path.as_ref();
    let actual = ArtifactRef::of(path)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(MANIFEST_SUFFIX))
        .collect();
    entries.sort();
    for mpath in entries {
        let Ok(m) = RunManifest::load(&mpath) else {
            log::warn!("ignoring unreadable manifest {}", mpath.display());
            continue;
        };
        for out in m.outputs.iter().filter(|o| same_file(&o.path, path)) {
            if out.sha256 != actual.sha256 {
                return Err(Error::HashMismatch {
                    path: path.display().to_string(),
                    expected: out.sha256.clone(),
                    actual: actual.sha256,
                });
            }
        }
    }
    Ok(actual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("model.bin");
        fs::write(&art, b"weights").unwrap();
        let mut m = RunManifest::new("train-teacher", Some(1), serde_json::json!({"epochs": 1}));
        m.add_output(&art).unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(verify_artifact(&art).unwrap().sha256, m.outputs[0].sha256);
        fs::write(&art, b"weightz").unwrap();
        assert!(matches!(verify_artifact(&art), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn unlisted_files_pass_and_are_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("series.csv");
        fs::write(&f, b"day,dissolved_oxygen\n").unwrap();
        let r = verify_artifact(&f).unwrap();
        assert_eq!(r.sha256.len(), 64);
        assert!(verify_artifact(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn timestamp_is_the_only_volatile_field() {
        let mut a = RunManifest::new("report", None, serde_json::Value::Null);
        let mut b = a.clone();
        a.created_unix = 1;
        b.created_unix = 2;
        assert_eq!(a.without_timestamp().unwrap(), b.without_timestamp().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = a.write(dir.path()).unwrap();
        assert!(p.ends_with("report.manifest.json"));
        assert_eq!(RunManifest::load(p).unwrap(), a);
    }
}
