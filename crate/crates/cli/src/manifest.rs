//! Run manifest: input hashes, seeds and versions, written next to the
//! stage outputs so a run can be audited and reproduced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub stages: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl Manifest {
    pub fn new(seed: u64, config_path: &Path) -> std::io::Result<Self> {
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_file(config_path)?,
            stages: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }
}
