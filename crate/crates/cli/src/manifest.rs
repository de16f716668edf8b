//! Per-stage record of inputs, outputs and parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use dataclone_core::jsonl::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Stage;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: Option<u64>,
    /// Hash of the config values the stage reads.
    pub params: String,
    /// Relative path to sha256 for every upstream artifact the stage read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_fingerprint: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(hash_bytes(&fs::read(path)?))
}

impl Manifest {
    /// The manifest in `out_dir`, or an empty one.
    pub fn load(out_dir: &Path) -> Result<Self, CliError> {
        let path = out_dir.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Runtime(format!("corrupt manifest {}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(CliError::Runtime(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())
            .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))
    }

    /// Outputs of `stage`, provided the stage completed and every output is
    /// still on disk unchanged.
    pub fn intact_outputs(&self, stage: Stage, out_dir: &Path) -> Option<&BTreeMap<String, String>> {
        let rec = self.stages.get(&stage)?;
        rec.outputs
            .iter()
            .all(|(rel, h)| hash_file(&out_dir.join(rel)).is_ok_and(|cur| &cur == h))
            .then_some(&rec.outputs)
    }

    /// A stage is current when its record matches the would-be record and
    /// its outputs are intact.
    pub fn is_current(&self, stage: Stage, candidate: &StageRecord, out_dir: &Path) -> bool {
        self.stages.get(&stage).is_some_and(|rec| {
            rec.seed == candidate.seed
                && rec.params == candidate.params
                && rec.inputs == candidate.inputs
                && self.intact_outputs(stage, out_dir).is_some()
        })
    }
}
