use thiserror::Error;

use crate::hooks::HookError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("view index {0} out of range 0..=29")]
    IndexOutOfRange(usize),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid panorama: {0}")]
    InvalidPanorama(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("{} canvas pixel(s) not covered by any contribution, first: {:?}", .0.len(), .0.first())]
    Coverage(Vec<(usize, usize)>),

    #[error("quaternion is not unit length (norm {0})")]
    Normalization(f64),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("point cloud is empty: no valid points in any map")]
    EmptyCloud,

    #[error("hook failed on view {view}: {source}")]
    ViewHook {
        view: usize,
        #[source]
        source: HookError,
    },

    #[error(transparent)]
    Hook(#[from] HookError),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
