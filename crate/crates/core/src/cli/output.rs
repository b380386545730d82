use std::path::{Path, PathBuf};

use serde::Serialize;

use super::manifest::{timestamp, RunManifest};
use super::{CliError, Command};
use crate::exec::PRNG_ALGORITHM;

pub const MANIFEST_FILE: &str = "manifest.json";

/// An output directory that remembers what was written to it.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<String>,
    started_at: String,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            started_at: timestamp(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::input(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(crate::Error::from)? + "\n";
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest last, listing itself among the outputs.
    pub fn finish(mut self, command: &Command, inputs: Vec<PathBuf>) -> Result<Vec<String>, CliError> {
        self.written.push(MANIFEST_FILE.to_string());
        self.written.sort();
        self.written.dedup();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            prng: PRNG_ALGORITHM.to_string(),
            command: command.clone(),
            inputs,
            outputs: self.written.clone(),
            started_at: self.started_at.clone(),
            finished_at: timestamp(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, manifest.to_json()?).map_err(|e| CliError::input(&path, e))?;
        Ok(self.written)
    }
}
