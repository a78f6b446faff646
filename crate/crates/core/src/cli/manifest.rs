use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::CliError;
use crate::digest::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What one stage read, wrote and decided.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Run-relative path to SHA-256 of the content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub cluster: u64,
    pub baseline: u64,
}

/// `manifest.json` in the run directory. Rewritten after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seeds: Seeds,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            seeds: Seeds {
                cluster: cfg.cluster.seed,
                baseline: cfg.baseline.seed,
            },
            config: cfg.for_manifest(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the existing manifest, keeping its stage records but taking
    /// the current config and seeds.
    pub fn open(out_dir: &Path, cfg: &RunConfig) -> Self {
        let mut fresh = Self::new(cfg);
        if let Ok(text) = std::fs::read_to_string(out_dir.join(MANIFEST_FILE)) {
            if let Ok(old) = serde_json::from_str::<RunManifest>(&text) {
                fresh.stages = old.stages;
            }
        }
        fresh
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Stage {
            stage: "manifest",
            message: e.to_string(),
        })?;
        std::fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

/// Builds a record by hashing the named run-relative files.
pub fn record(
    out_dir: &Path,
    inputs: &[&str],
    outputs: &[&str],
    details: serde_json::Value,
) -> StageRecord {
    let hash = |names: &[&str]| {
        names
            .iter()
            .filter_map(|n| {
                let bytes = std::fs::read(out_dir.join(n)).ok()?;
                Some(((*n).to_owned(), sha256_hex(bytes)))
            })
            .collect()
    };
    StageRecord {
        inputs: hash(inputs),
        outputs: hash(outputs),
        details,
    }
}
