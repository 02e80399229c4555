//! Masked video-text autoencoder pre-training at desk scale.
//!
//! Visible video cubes and text tokens share one Transformer encoder; dual
//! decoders reconstruct masked pixels and words, with optional contrastive
//! and matching objectives. Everything from the autodiff kernel to the
//! retrieval metrics lives in this crate.

pub mod config;
pub mod evalkit;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synthclips;
pub mod trainer;

use std::path::PathBuf;

use thiserror::Error;

pub use masking::MaskError;

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS after every step. On glibc, buffers above 128 KiB are otherwise
/// mmap-ed and unmapped each time, and the page faults cost about a quarter
/// of a training step. A no-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
pub use numerics::NumericsError;
pub use synthclips::DataError;

/// Broad failure class, used by the command line for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Contract,
    Io,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Contract => "contract",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("non-finite {what} at step {step}; batch dumped to {dump}")]
    NonFinite { what: String, step: u64, dump: PathBuf },
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Data(DataError::Config(_)) => Category::Config,
            Error::Data(_) => Category::Io,
            Error::Mask(MaskError::Ratio(_) | MaskError::Config(_)) => Category::Config,
            Error::Io { .. } | Error::Checkpoint { .. } => Category::Io,
            Error::Contract(_) | Error::Numerics(_) | Error::Mask(_) | Error::NonFinite { .. } => Category::Contract,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
