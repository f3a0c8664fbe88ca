//! Mix-attention U-shaped segmentation decoder, built from scratch.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major f64 tensors (rank 1-4) and the forward math
//! - [`autodiff`]: a reverse-mode tape over those tensors, plus a
//!   finite-difference gradient checker
//! - [`nn`]: layers (linear, layer norm, feed-forward, multi-head attention)
//!   generic over plain tensors vs. tape variables
//! - [`model`]: the encoder stub, the mix-attention decoder with its
//!   U-shaped query/kv routing, and the segmentation head
//! - [`analysis`]: closed-form parameter and FLOP accounting
//! - [`data`], [`train`], [`eval`], [`checkpoint`]: synthetic shape datasets,
//!   deterministic Adam training, mIoU evaluation, and a binary checkpoint
//!   format with bit-exact round-trips
//! - [`gradcheck`], [`ablate`]: the verification harnesses — finite-difference
//!   sweeps over ops, a decoder stage, and the full model, and the four-arm
//!   attention/propagation ablation

pub mod ablate;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

/// Crate-wide error type. The CLI maps these onto process exit codes, so the
/// split between variants is part of the external contract: configuration and
/// usage problems are "your request was malformed" (exit 1), numeric failures
/// are "the computation itself broke down" (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation. Carries the
    /// operation name and a description naming both shapes.
    #[error("{op}: {detail}")]
    Dim { op: String, detail: String },

    /// Invalid model / dataset / run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse: wrong call sequence, mixed tapes, backward twice, ...
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical breakdown: non-finite loss, failed gradient check.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Malformed file contents (checkpoints, datasets, configs on disk).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &str, detail: String) -> Error {
        Error::Dim { op: op.to_string(), detail }
    }

    /// Exit code the CLI should terminate with for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
