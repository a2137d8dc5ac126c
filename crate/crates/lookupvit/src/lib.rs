//! Token-compression vision transformer blocks, built from scratch.
//!
//! The crate keeps two token streams per image: a large set of *lookup*
//! tokens straight from patch embedding, and a small set of *compressed*
//! tokens obtained by bilinearly resizing the lookup features. Heavy
//! transformer compute runs only on the compressed set; the two streams
//! exchange information through bidirectional cross-attention that computes
//! its softmax once and reuses the weights in the reverse direction.
//!
//! Modules:
//! - [`tensor`]: dense arrays, a reverse-mode tape, and MAC instrumentation
//! - [`tokenizer`]: patch embedding and token-pair construction
//! - [`block`]: the compression block (cross-attention + ViT block + MLPs)
//! - [`model`]: block stacks, dual classifier heads, loss and inference
//! - [`train`]: Adam loop with multi-resolution grid sampling
//! - [`flops`]: closed-form block cost model plus empirically counted MACs
//! - [`data`], [`checkpoint`], [`pgm`], [`config`]: harness plumbing

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod flops;
pub mod model;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, resize targets, ...).
    Shape(String),
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// An API contract was violated (non-scalar loss, stale attention, ...).
    Contract(String),
    /// A kernel produced NaN or Inf.
    NonFinite(String),
    /// File or stream format problem (checkpoint, dataset, config JSON).
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
