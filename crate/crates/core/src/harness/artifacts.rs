//! Artifact IO: stamped JSON/CSV files and the per-run manifest.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::Error;
use crate::util::sha256_hex;
use crate::Result;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// One record per CLI invocation: which files it produced and their content
/// hashes. Timings are the only non-reproducible fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub subcommand: String,
    pub config_hash: String,
    pub tool_version: String,
    pub files: Vec<ManifestEntry>,
    pub wall_ms: u128,
}

/// Collects written files and finalizes the manifest.
pub struct ArtifactWriter {
    out_dir: PathBuf,
    config_hash: String,
    files: Vec<ManifestEntry>,
    started: std::time::Instant,
}

impl ArtifactWriter {
    pub fn new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(ArtifactWriter {
            out_dir: out_dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            files: Vec::new(),
            started: std::time::Instant::now(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)?;
        self.files.push(ManifestEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Serializes a value as pretty JSON. The value is expected to carry the
    /// config hash in one of its own fields.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.record(name, text.as_bytes())
    }

    /// CSV with a `# config_hash=…` comment line followed by a header row.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
        let mut text = format!("# config_hash={}\n{header}\n", self.config_hash);
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.record(name, text.as_bytes())
    }

    pub fn finish(self, subcommand: &str) -> Result<RunManifest> {
        let manifest = RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            subcommand: subcommand.to_string(),
            config_hash: self.config_hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            files: self.files.clone(),
            wall_ms: self.started.elapsed().as_millis(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.out_dir.join(format!("manifest-{subcommand}.json")), text)?;
        Ok(manifest)
    }
}

/// Loads a stamped JSON artifact and checks its config hash against the
/// active config.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::invalid(format!("cannot read artifact {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Extracts the `config_hash` field from any stamped JSON artifact.
pub fn json_config_hash(path: &Path) -> Result<String> {
    let value: serde_json::Value = read_json(path)?;
    value
        .get("config_hash")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::invalid(format!("{} carries no config_hash", path.display())))
}

/// Extracts the hash from a CSV artifact's `# config_hash=` comment line.
pub fn csv_config_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .next()
        .and_then(|line| line.strip_prefix("# config_hash="))
        .map(|s| s.to_string())
        .ok_or_else(|| Error::invalid(format!("{} carries no config_hash", path.display())))
}

pub fn expect_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::invalid(format!(
            "config hash mismatch for {}: artifact {found}, active config {expected}",
            path.display()
        )));
    }
    Ok(())
}
