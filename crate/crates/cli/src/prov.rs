use std::fmt::Display;
use std::path::{Path, PathBuf};

use kcd_core::{sha256_hex, Result};
use serde::{Serialize, Serializer};
use serde_json::Value;

pub fn display<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// What a run read and wrote, with enough context to re-derive it.
#[derive(Debug, Serialize)]
pub struct Record {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub result: Value,
}

/// Accumulates hashed inputs and outputs of one command.
#[derive(Debug, Default)]
pub struct Tracker {
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    /// Output paths are recorded relative to this directory when set.
    base: Option<PathBuf>,
}

impl Tracker {
    pub fn rooted(dir: &Path) -> Self {
        Tracker { base: Some(dir.to_path_buf()), ..Tracker::default() }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let shown = match &self.base {
            Some(b) => path.strip_prefix(b).unwrap_or(path),
            None => path.file_name().map(Path::new).unwrap_or(path),
        };
        self.outputs.push(FileHash { path: shown.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn input_hashes(&self) -> Vec<String> {
        self.inputs.iter().map(|f| f.sha256.clone()).collect()
    }

    pub fn finish(self, command: Value, seed: Option<u64>, result: Value, path: &Path) -> Result<()> {
        let rec = Record {
            tool: "kcd",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            result,
        };
        let text = serde_json::to_string_pretty(&rec).expect("provenance serializes") + "\n";
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `<file>.prov.json` next to a single-file artifact.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}
