//! Output manifests: config hash, seed, and content hashes of every input
//! and output file. No timestamps, so re-runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rlvio::Error;

use crate::config::RunConfig;
use crate::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Checkpoints and data read, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    /// Files written, keyed by path relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> CliResult<Self> {
        Ok(Manifest {
            command: command.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let key = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs.insert(key, file_sha256(path)?);
        Ok(())
    }

    /// Hashes every file of a log directory, keyed `dir/relative`.
    pub fn input_dir(&mut self, dir: &Path) -> CliResult<()> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for p in rlvio::ingest::log_paths(dir) {
            if p.exists() {
                let rel = p.strip_prefix(dir).unwrap_or(&p);
                self.inputs
                    .insert(format!("{name}/{}", rel.display()), file_sha256(&p)?);
            }
        }
        Ok(())
    }

    pub fn output(&mut self, root: &Path, path: &Path) -> CliResult<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.insert(rel.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e).into())
    }
}
