//! The `panosplat` pipeline driver.
//!
//! Every stage reads the artifacts of the stages before it from the output
//! directory, writes its own below `<out>/<stage>/` and records a
//! `manifest.json` there with hashes of everything it consumed and
//! produced. A stage whose manifest still matches its inputs is skipped.

pub mod config;
pub mod manifest;
pub mod stages;

use thiserror::Error;

pub use config::{HookSpec, PipelineConfig};
pub use stages::{run_pipeline, Stage, StageStatus};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    User(String),
    #[error("stage {needed_by} needs {artifact}, which is produced by stage \"{producer}\"; run it first")]
    Dependency {
        needed_by: &'static str,
        artifact: String,
        producer: &'static str,
    },
    #[error("hook failure: {0}")]
    Hook(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::User(_) | PipelineError::Dependency { .. } => 1,
            PipelineError::Hook(_) => 2,
            PipelineError::Internal(_) => 3,
        }
    }
}

impl From<panosplat::Error> for PipelineError {
    fn from(e: panosplat::Error) -> Self {
        use panosplat::Error as E;
        match e {
            E::Hook(_) | E::ViewHook { .. } => PipelineError::Hook(e.to_string()),
            E::Format { .. }
            | E::Image(_)
            | E::Json(_)
            | E::InvalidPanorama(_)
            | E::InvalidIntrinsics(_)
            | E::Dimension(_)
            | E::EmptyCloud
            | E::Degenerate(_)
            | E::Normalization(_) => PipelineError::User(e.to_string()),
            _ => PipelineError::Internal(e.to_string()),
        }
    }
}

impl From<panosplat::hooks::HookError> for PipelineError {
    fn from(e: panosplat::hooks::HookError) -> Self {
        PipelineError::Hook(e.to_string())
    }
}

impl From<panosplat::trainer::TrainError> for PipelineError {
    fn from(e: panosplat::trainer::TrainError) -> Self {
        use panosplat::trainer::TrainError as T;
        match e {
            T::Precondition(m) => PipelineError::User(m),
            T::Core(inner) => inner.into(),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<panosplat::refine::RefineError> for PipelineError {
    fn from(e: panosplat::refine::RefineError) -> Self {
        match e {
            panosplat::refine::RefineError::Generator { .. } => PipelineError::Hook(e.to_string()),
            panosplat::refine::RefineError::Persist(m) => PipelineError::Internal(m),
        }
    }
}
