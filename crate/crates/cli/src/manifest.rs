use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything needed to rerun a command: its flags, the effective config,
/// seeds, and digests of what it read and wrote.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: BTreeMap<String, String>,
    pub config: Option<BTreeMap<String, String>>,
    pub seeds: BTreeMap<String, u64>,
    /// sha256 of each input file, keyed by path.
    pub input_digests: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// sha256 of the checkpoint this run wrote (or, for read-only
    /// commands, the one it read).
    pub checkpoint_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    /// Records the digest of every corpus split present in `dir`.
    pub fn corpus(&mut self, dir: &Path) -> Result<(), CliError> {
        for name in ["train.txt", "valid.txt", "test.txt"] {
            let p = dir.join(name);
            if p.exists() {
                self.input(&p)?;
            }
        }
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<String, CliError> {
        let digest = file_sha256(path)?;
        self.input_digests.insert(path.display().to_string(), digest.clone());
        Ok(digest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Prints the manifest to standard error and, when `path` is given,
    /// writes it there too.
    pub fn emit(&self, path: Option<&Path>) -> Result<(), CliError> {
        eprintln!("{}", serde_json::to_string(self).expect("manifest serializes"));
        if let Some(p) = path {
            fs::write(p, self.to_json() + "\n").map_err(|e| CliError::io(p, e))?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
