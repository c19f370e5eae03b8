use std::io;

use thiserror::Error;

/// Errors produced by the training library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("custom gradient for `{op}` violated its shape contract: {detail}")]
    CustomGradContract { op: String, detail: String },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("layer `{layer}` is degenerate: all {count} weights equal (sigma = 0)")]
    DegenerateLayer { layer: String, count: usize },

    #[error("layer `{layer}` has non-positive scaling factor {scale}")]
    NonPositiveScale { layer: String, scale: f64 },

    #[error("quantizer state of layer `{0}` is stale w.r.t. its weights")]
    StaleQuantizer(String),

    #[error("invalid ternary code {0}")]
    InvalidCode(i8),

    #[error("reserved bit pair 0b11 at code index {0}")]
    ReservedCode(usize),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
