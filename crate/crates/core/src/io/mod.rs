//! File formats: PNG images, PFM float maps, PLY scenes and point clouds,
//! JSON pose lists and embedding files.

mod embedding;
mod pfm;
mod ply;
mod png;
mod poses;

pub use embedding::{read_embedding, write_embedding};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use ply::{read_point_cloud_ply, read_scene_ply, write_point_cloud_ply, write_scene_ply};
pub use png::{decode_png, encode_png, read_png, write_png, BitDepth};
pub use poses::{read_poses, write_poses, PoseRecord};

use std::path::Path;

pub(crate) fn format_error(path: &Path, message: impl Into<String>) -> crate::Error {
    crate::Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}
