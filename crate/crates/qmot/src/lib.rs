//! Query-based multi-object tracker built around collaborative temporal
//! queries: each tracked object is represented by several historical content
//! features that jointly track it through a stack of attention-masked
//! decoders, with an information refinement module fusing temporal clues
//! between decoder layers.
//!
//! The crate also ships a synthetic moving-object video generator, a
//! frame-rate downsampling harness, and a CLEAR/IDF1/HOTA evaluation suite
//! so the frame-rate behaviour of the tracker can be measured end to end.

pub mod assignment;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod geom;
pub mod irm;
pub mod losses;
pub mod manifest;
pub mod masks;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod synthgen;
pub mod tracker;
pub mod trainer;
pub mod types;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
