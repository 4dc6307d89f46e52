use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nbf_core::recording::write_atomic;
use nbf_core::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::validation(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(CliError::from)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::validation(e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)?;
    Ok(bytes)
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: Vec<String>,
    /// SHA-256 of the config file exactly as read, when one was given.
    pub config_digest: Option<String>,
    pub config: Option<TrainConfig>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 per input path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 per output path.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(argv: &[String]) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                tool: "nbf",
                tool_version: env!("CARGO_PKG_VERSION"),
                command: argv.to_vec(),
                config_digest: None,
                config: None,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_seconds: 0.0,
                extra: BTreeMap::new(),
            },
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn output(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.outputs.insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn config(&mut self, config: &TrainConfig, file_digest: Option<String>) {
        self.manifest.config_digest = file_digest;
        self.manifest.config = Some(config.clone());
        self.seed("config", config.seed);
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.into(), seed);
    }

    pub fn extra(&mut self, key: &str, value: serde_json::Value) {
        self.manifest.extra.insert(key.into(), value);
    }

    pub fn write(mut self, path: &Path) -> CliResult<()> {
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        write_json(path, &self.manifest).map(|_| ())
    }
}
