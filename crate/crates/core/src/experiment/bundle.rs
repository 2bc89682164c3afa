use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{format_float, write_csv};

pub const MANIFEST: &str = "manifest.csv";

/// Output directory that records every file written into it.
#[derive(Debug)]
pub struct Bundle {
    root: PathBuf,
    files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

impl Bundle {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for `name` inside the bundle, registered for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    /// Writes `manifest.csv` (file, bytes, sha256) and returns its entries.
    pub fn finish(self) -> Result<Vec<ManifestEntry>> {
        let mut entries = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.root.join(name);
            let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                file: name.clone(),
                bytes: data.len() as u64,
                sha256: sha256_hex(&data),
            });
        }
        write_csv(
            &self.root.join(MANIFEST),
            &["file", "bytes", "sha256"],
            entries
                .iter()
                .map(|e| vec![e.file.clone(), e.bytes.to_string(), e.sha256.clone()]),
        )?;
        Ok(entries)
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Named scalar results, written as `metric,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    entries: Vec<(String, f64)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["metric", "value"],
            self.entries.iter().map(|(n, v)| vec![n.clone(), format_float(*v)]),
        )
    }
}
