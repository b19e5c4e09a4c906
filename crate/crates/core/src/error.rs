use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the geometry, network and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("degenerate mesh: total surface area is zero")]
    DegenerateMesh,

    #[error("degenerate point cloud: all points coincide")]
    DegenerateCloud,

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint does not match architecture: {0}")]
    CheckpointMismatch(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient check failed for tensors: {0:?}")]
    GradCheck(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Consistency(_) => "consistency",
            Error::DegenerateMesh => "degenerate_mesh",
            Error::DegenerateCloud => "degenerate_cloud",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Parse { .. } => "parse",
            Error::Dataset(_) => "dataset",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Contract(_) => "contract",
            Error::GradCheck(_) => "grad_check",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
