//! Embeddings are stored as raw little-endian float32 (`<stem>.bin`) next to
//! a JSON sidecar (`<stem>.json`) holding `{dim, source_id}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::Embedding;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    source_id: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn write_embedding(stem: impl AsRef<Path>, emb: &Embedding) -> Result<()> {
    let (bin, json) = paths(stem.as_ref());
    let mut bytes = Vec::with_capacity(emb.vector().len() * 4);
    for &v in emb.vector() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(bin, bytes)?;
    let side = Sidecar {
        dim: emb.vector().len(),
        source_id: emb.source_id().to_string(),
    };
    std::fs::write(json, serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn read_embedding(stem: impl AsRef<Path>) -> Result<Embedding> {
    let (bin, json) = paths(stem.as_ref());
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
    let bytes = std::fs::read(&bin)?;
    if bytes.len() != side.dim * 4 {
        return Err(super::format_error(
            &bin,
            format!("sidecar declares dim {} but file holds {} bytes", side.dim, bytes.len()),
        ));
    }
    let vector = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Embedding::new(vector, side.source_id)
}
