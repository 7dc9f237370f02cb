//! Output directory bookkeeping: resolved config plus checksums of every
//! input and artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";

/// Adds the offending path to an I/O error.
pub fn with_path(e: std::io::Error, path: &Path) -> CliError {
    CliError::Core(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| with_path(e, path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: &'a Value,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Collects the files a command writes under its output directory.
pub struct RunDir {
    root: PathBuf,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates `root` and echoes the resolved config into it.
    pub fn create(root: &Path, config: &Value) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| with_path(e, root))?;
        let mut run = RunDir {
            root: root.to_path_buf(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        run.write_json(CONFIG_FILE, config)?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes).map_err(|e| with_path(e, &path))?;
        self.outputs.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Records a file some library call already wrote under the root.
    pub fn record(&mut self, path: &Path) -> Result<(), CliError> {
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| CliError::Usage(format!("{} is outside the output directory", path.display())))?;
        let digest = sha256_file(path)?;
        self.outputs.insert(rel.display().to_string(), digest);
        Ok(())
    }

    /// Writes the run record.
    pub fn finish(self, command: &str, seed: Option<u64>) -> Result<(), CliError> {
        let record = RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        std::fs::write(self.root.join(RUN_FILE), text)?;
        Ok(())
    }
}
