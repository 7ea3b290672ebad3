use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

/// Git-style object id: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so repeated runs
/// can produce identical manifests.
pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub config: Value,
    /// Split name to hash of its `manifest.jsonl`.
    pub datasets: BTreeMap<String, String>,
    pub started_at: u64,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.to_string(),
            // --force never changes outputs, so it is left out.
            args: std::env::args().skip(1).filter(|a| a != "--force").collect(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            datasets: BTreeMap::new(),
            started_at: timestamp(),
            threads: rayon_threads(),
        }
    }

    pub fn hash_split(&mut self, name: &str, split_dir: &Path) -> std::io::Result<()> {
        let bytes = fs::read(split_dir.join("manifest.jsonl"))?;
        self.datasets.insert(name.to_string(), blob_hash(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(dir.join(RUN_MANIFEST), text)
    }
}

fn rayon_threads() -> usize {
    std::env::var("CVRLAB_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}
