//! Dual-encoder / dual-Q-Former image captioning at desk scale.
//!
//! The pipeline mirrors the MSMedCap architecture: two frozen image encoders
//! with different granularities (a blurred "general" branch and a full-detail
//! branch), one query transformer per branch trained with contrastive,
//! matching, and generation objectives on a mixed general/medical corpus, and
//! a frozen decoder LM that captions from the concatenated query projections.
//!
//! Everything runs on the CPU over `f64` with a small reverse-mode tape
//! ([`tensor`]), so analytic gradients can be checked against central finite
//! differences end to end.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod fingerprint;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod ppm;
pub mod qformer;
pub mod tensor;
pub mod training;

use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by the exit-code class the
/// CLI maps them to: config (2), data (3), numeric (4), artifact (5).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("corrupt blob: {0}")]
    CorruptBlob(String),

    #[error("fingerprint mismatch for {component}: checkpoint {stored}, live {live}")]
    FingerprintMismatch {
        component: String,
        stored: String,
        live: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: config 2, data 3, numeric 4, artifact 5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Shape(_) | Error::Numeric(_) => 4,
            Error::MissingArtifact(_)
            | Error::VersionMismatch { .. }
            | Error::CorruptBlob(_)
            | Error::FingerprintMismatch { .. } => 5,
            Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
