//! Toolkit-level error type. Core math errors are wrapped where they cross
//! into IO-bearing code paths.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolkitError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("codebook {path} failed validation:\n{report}")]
    CodebookInvalid { path: PathBuf, report: String },

    #[error("missing files under {root}:\n{listing}")]
    MissingFiles { root: PathBuf, listing: String },

    #[error("unknown label {label:?} (classes: {known})")]
    UnknownLabel { label: String, known: String },

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("landmark error for {id}: {source}")]
    Landmark {
        id: String,
        #[source]
        source: aufer_core::landmarks::LandmarkError,
    },

    #[error("heatmap error for {id}: {source}")]
    AuMap {
        id: String,
        #[source]
        source: aufer_core::aumap::AuMapError,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("run directory {path}: {message}")]
    RunDir { path: PathBuf, message: String },

    #[error("training failed: {0}")]
    Train(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("unknown CAM method: {0}")]
    UnknownCamMethod(String),

    #[error("CAM method {method} requires a global-average-pool + linear head; backbone {backbone} lacks one")]
    ArchitectureMismatch { method: String, backbone: String },
}

impl ToolkitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolkitError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        ToolkitError::Format { path: path.into(), message: message.into() }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ToolkitError::Config { field: field.into(), message: message.into() }
    }
}
