//! Per-command manifests: config hash, input hashes, output hashes, and
//! the seed, enabling exact reruns and stage-composability checks.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input file name -> sha256 at read time.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> sha256 at write time.
    pub outputs: BTreeMap<String, String>,
    /// Free-form command-specific summary (counts, losses, ...).
    pub info: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_sha256: String) -> Manifest {
        Manifest {
            command: command.to_string(),
            seed,
            config_sha256,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            info: serde_json::Value::Null,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn path_for(work_dir: &Path, command: &str) -> std::path::PathBuf {
        work_dir.join(format!("{command}.manifest.json"))
    }

    pub fn save(&self, work_dir: &Path) -> Result<()> {
        let path = Self::path_for(work_dir, &self.command);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }

    pub fn load(work_dir: &Path, command: &str) -> Result<Manifest> {
        let path = Self::path_for(work_dir, command);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!(
                "no manifest for stage {command:?} ({}); run `mqlrec {command}` first",
                path.display()
            )
        })?;
        serde_json::from_str(&text)
            .with_context(|| format!("corrupt manifest {}", path.display()))
    }
}

/// Check that `path` still matches the hash recorded when the producing
/// stage wrote it.
pub fn verify_produced_by(work_dir: &Path, producer: &str, path: &Path) -> Result<()> {
    let manifest = Manifest::load(work_dir, producer)?;
    let key = path.display().to_string();
    let Some(recorded) = manifest.outputs.get(&key) else {
        bail!(
            "manifest for {producer:?} does not list {key}; rerun `mqlrec {producer}`"
        );
    };
    let current = sha256_file(path)?;
    if &current != recorded {
        bail!(
            "{key} changed since `mqlrec {producer}` produced it \
             (recorded {recorded}, found {current}); rerun the stage"
        );
    }
    Ok(())
}
