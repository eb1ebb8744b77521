//! Per-stage provenance manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input path → sha256; paths inside the output directory are relative.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output directory) → sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Internal(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Key under which a file is recorded: relative to `root` when inside it.
pub fn record_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn hash_files(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>, PipelineError> {
    files.iter().map(|f| Ok((record_key(root, f), file_sha256(f)?))).collect()
}

/// All files below `dir` except the manifest, sorted.
pub fn list_outputs(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| PipelineError::Internal(format!("cannot list {}: {e}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| PipelineError::Internal(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name() != Some(MANIFEST_NAME.as_ref()) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Manifest {
    pub fn read(path: &Path) -> Option<Manifest> {
        serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| PipelineError::Internal(format!("cannot write {}: {e}", path.display())))
    }

    /// True when `self` describes the same run and every listed output is
    /// still present with its recorded hash.
    pub fn is_current(&self, wanted: &Manifest, root: &Path) -> bool {
        if (&self.stage, &self.version, self.seed, &self.config_sha256, &self.inputs)
            != (&wanted.stage, &wanted.version, wanted.seed, &wanted.config_sha256, &wanted.inputs)
        {
            return false;
        }
        self.outputs
            .iter()
            .all(|(k, h)| file_sha256(&root.join(k)).is_ok_and(|got| &got == h))
    }
}
