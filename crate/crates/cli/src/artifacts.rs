//! Output directory bookkeeping and the content-hashed manifest.

use std::path::{Path, PathBuf};

use fastslow::io::{write_json, CsvWriter};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// False when the run stopped early; the listed files are what was written.
    pub complete: bool,
    pub error: Option<String>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|f| f.path == name)
    }
}

/// Files emitted by one run, in creation order.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("out: cannot create {}: {e}", dir.display())))?;
        // a stale manifest would describe files this run may not rewrite
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            std::fs::remove_file(stale)?;
        }
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn register(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn csv<S: AsRef<str>>(&mut self, name: &str, header: &[S]) -> Result<CsvWriter, CliError> {
        let path = self.register(name);
        Ok(CsvWriter::create(&path, header)?)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.register(name);
        Ok(write_json(&path, value)?)
    }

    /// Path for a file written by other means; it is hashed like the rest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.register(name)
    }

    pub fn finish(self, command: &str, seed: u64, error: Option<String>) -> Result<Manifest, CliError> {
        let mut files = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.dir.join(name);
            if !path.exists() {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            files.push(ManifestEntry {
                path: name.clone(),
                sha256: hex(&Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest { command: command.to_string(), seed, complete: error.is_none(), error, files };
        write_json(&self.dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hashes_every_registered_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        let mut w = a.csv("t.csv", &["a", "b"]).unwrap();
        w.numbers(&[1.0, 2.0]).unwrap();
        w.finish().unwrap();
        a.json("s.json", &serde_json::json!({"k": 1})).unwrap();
        let m = a.finish("simulate", 3, None).unwrap();
        assert!(m.complete);
        assert_eq!(m.files.len(), 2);
        let bytes = std::fs::read(dir.path().join("t.csv")).unwrap();
        assert_eq!(m.entry("t.csv").unwrap().sha256, hex(&Sha256::digest(&bytes)));
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn incomplete_runs_are_marked() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        a.path("never-written.csv");
        let m = a.finish("simulate", 3, Some("boom".into())).unwrap();
        assert!(!m.complete);
        assert!(m.files.is_empty());
        assert_eq!(m.error.as_deref(), Some("boom"));
    }

    #[test]
    fn hex_digest() {
        assert_eq!(hex(&Sha256::digest(b"")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
