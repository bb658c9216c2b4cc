//! Run provenance: every command records what it ran, on which inputs, and
//! what it produced, so identical reruns are checkable by hash.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// argv as invoked.
    pub command: Vec<String>,
    pub seed: Option<u64>,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    /// sha256 per consumed file.
    pub input_hashes: BTreeMap<String, String>,
    /// sha256 per produced file; identical inputs must reproduce these.
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
    pub git_describe: String,
}

impl RunManifest {
    pub fn new(seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: std::env::args().collect(),
            seed,
            config,
            input_hashes: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_seconds: 0.0,
            git_describe: git_describe(),
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let hash = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Writes via a temp file + rename so a crash never leaves a torn
    /// manifest.
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}
