use std::path::PathBuf;

use barkid_nn::NnError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value or configuration violates a precondition.
    #[error("{0}")]
    Invalid(String),

    #[error("root not found: {}", .0.display())]
    RootNotFound(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("architecture mismatch at layer `{layer}`: {detail}")]
    ArchitectureMismatch { layer: String, detail: String },

    #[error(
        "pretrained weights for {backbone} not found at {}; export them once with \
         tools/export_keras_weights.py into a cache directory and point BARKID_WEIGHTS_DIR at it, \
         or set pretrained = false",
        path.display()
    )]
    WeightsUnavailable { backbone: String, path: PathBuf },

    /// Training or cross-validation stopped before finishing.
    #[error("{0}")]
    Aborted(String),

    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True when the failure stems from bad input or configuration rather than
    /// from something going wrong while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::RootNotFound(_) | Error::ArchitectureMismatch { .. } | Error::WeightsUnavailable { .. }
        )
    }
}
