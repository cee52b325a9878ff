//! Run manifests and digest-tracked file access.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub key: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Complete configuration, defaults filled in and paths absolute.
    pub config: Map<String, Value>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::file(path, e))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "{}: manifest schema {}, expected {MANIFEST_SCHEMA_VERSION}",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn output(&self, name: &str) -> Option<&FileDigest> {
        self.outputs.iter().find(|d| d.path == name)
    }

    /// Check every recorded input still has its digest.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for d in &self.inputs {
            let path = Path::new(&d.path);
            let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
            let found = sha256_hex(&bytes);
            if found != d.sha256 {
                return Err(CliError::DigestMismatch { path: d.path.clone(), expected: d.sha256.clone(), found });
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects input digests while reading and output digests while writing.
#[derive(Debug)]
pub struct RunFiles {
    pub out_dir: PathBuf,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunFiles {
    pub fn new(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::file(out_dir, e))?;
        Ok(Self { out_dir: out_dir.to_path_buf(), inputs: vec![], outputs: vec![] })
    }

    pub fn read(&mut self, key: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
        let path_str = path.display().to_string();
        if !self.inputs.iter().any(|d| d.path == path_str) {
            self.inputs.push(FileDigest { key: key.to_string(), path: path_str, sha256: sha256_hex(&bytes) });
        }
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::file(&path, e))?;
        self.outputs.retain(|d| d.path != name);
        self.outputs.push(FileDigest { key: name.to_string(), path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(mut self, subcommand: &str, config: Map<String, Value>, seed: Option<u64>) -> Result<Manifest, CliError> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: "sapflux".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Validation(e.to_string()))?;
        text.push('\n');
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::file(&path, e))?;
        Ok(manifest)
    }
}
