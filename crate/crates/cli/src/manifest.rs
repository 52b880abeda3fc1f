//! Run manifests: what a command read, what it wrote, and how long it took.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    /// File name (relative to the output directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, config_toml: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_toml.as_bytes()),
            seed,
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
    }

    /// Write `manifest_<command>.json` via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let name = format!("manifest_{}.json", self.command.replace(' ', "_"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(name), json.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("sweep", "seed = 1\n", 1);
        m.record("fig5.csv", b"a,b\n");
        m.wall_time_s = 1.5;
        m.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest_sweep.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(!dir.path().join("manifest_sweep.tmp").exists());
    }
}
