//! Per-run reproducibility manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_sha256: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Inputs by file name, so moving them around does not change the digest.
    pub inputs: Vec<FileDigest>,
    /// Outputs relative to the run directory.
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            tool: "drivebench".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_sha256: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_dir() {
            for f in walk(path)? {
                let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
                self.inputs.push(FileDigest { path: format!("{name}/{rel}"), sha256: sha256_file(&f)? });
            }
        } else {
            self.inputs.push(FileDigest { path: name, sha256: sha256_file(path)? });
        }
        Ok(())
    }

    /// Records every file under `dir` (except the manifest) and writes
    /// `manifest.json`.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<Self> {
        self.outputs.clear();
        for f in walk(dir)? {
            let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            self.outputs.push(FileDigest { path: rel, sha256: sha256_file(&f)? });
        }
        self.finished_unix = unix_now();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self).expect("manifest serialises"))?;
        Ok(self)
    }
}

/// All files below `dir`, sorted.
pub fn walk(dir: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
