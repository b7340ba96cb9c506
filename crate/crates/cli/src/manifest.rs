use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl HashedFile {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// One per command invocation. Everything except `wall_clock_seconds` is a
/// function of the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<HashedFile>,
    /// Paths are relative to the output directory.
    pub outputs: Vec<HashedFile>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Hashes `outputs` (relative to `out_dir`) and writes the manifest there.
    pub fn write(&mut self, out_dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        self.outputs = outputs
            .iter()
            .map(|rel| {
                Ok(HashedFile {
                    path: rel.clone(),
                    sha256: sha256_file(&out_dir.join(rel))?,
                })
            })
            .collect::<Result<_>>()?;
        let path = out_dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
