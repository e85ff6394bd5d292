//! Run manifests: one JSON per artifact directory recording what produced it.

use serde::Serialize;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// FNV-1a over the serialized config; enough to detect config drift between
/// a manifest and a rerun.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunManifest {
    pub fn start<C: Serialize>(command: &str, seed: u64, config: &C) -> Self {
        let serialized = serde_json::to_vec(config).unwrap_or_default();
        Self {
            command: command.to_string(),
            config_hash: format!("{:016x}", fnv1a(&serialized)),
            seed,
            git_describe: git_describe(),
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn push_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<dir>/manifest.json`.
    pub fn finish_in(mut self, dir: &Path) -> Result<(), std::io::Error> {
        self.finished_unix = now_unix();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json)
    }

    /// For file outputs: writes `<file>.manifest.json` next to the artifact.
    pub fn finish_beside(mut self, file: &Path) -> Result<(), std::io::Error> {
        self.finished_unix = now_unix();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        std::fs::write(file.with_file_name(name), json)
    }
}
