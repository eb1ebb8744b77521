use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scene::CameraPose;

/// On-disk form of a [`CameraPose`]: quaternion as `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        let q = p.rotation;
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRecord> for CameraPose {
    fn from(r: PoseRecord) -> Self {
        let [w, x, y, z] = r.rotation;
        Self {
            rotation: Quaternion::new(w, x, y, z),
            translation: Vector3::from(r.translation),
        }
    }
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[CameraPose]) -> Result<()> {
    let json = serde_json::to_string_pretty(poses)?;
    std::fs::write(path.as_ref(), json + "\n")?;
    Ok(())
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<CameraPose>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let poses: Vec<CameraPose> = serde_json::from_str(&text)?;
    for p in &poses {
        p.validate()?;
    }
    Ok(poses)
}
