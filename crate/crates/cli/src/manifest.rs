use crate::config::{PresetRow, RunConfig};
use meagraph::model::HyperParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FORMAT: &str = "meagraph-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: pass the file back with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// The preset row as loaded, when one was named.
    pub preset: Option<PresetRow>,
    pub hyper: HyperParams,
    pub dataset_hash: Option<String>,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, hyper: HyperParams) -> anyhow::Result<Self> {
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            preset: config.preset_row()?,
            hyper,
            dataset_hash: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            config: config.clone(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(
            role.into(),
            InputFile {
                path: path.display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        Ok(())
    }
}
