//! Embedding pipeline for knowledge graphs that must absorb newly emerging
//! entities without retraining from scratch.
//!
//! An emerging (unseen) entity arrives with a handful of auxiliary triples
//! connecting it to the existing graph. This crate densifies that neighborhood
//! with *virtual neighbors*: triples inferred by logic rules and symmetric-path
//! rules, weighted by soft labels solved in closed form from a rule-consistency
//! program. A graph encoder (relation-weighted convolution layers plus one
//! query-aware attention layer) and a bilinear/translational decoder are then
//! trained jointly against observed triples and the soft-labeled virtual ones.
//!
//! Modules follow the pipeline order: [`store`] holds partitioned triple sets,
//! [`split`] carves an emerging-entity evaluation scenario out of a standard
//! dataset, [`rules`] and [`sp`] produce candidate virtual neighbors,
//! [`softlabel`] assigns their labels, [`tensor`]/[`tape`] provide the
//! reverse-mode autodiff core, [`model`] the encoder/decoders, [`trainer`] the
//! optimization loop, and [`eval`] ranking plus triple-classification metrics.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod rules;
pub mod softlabel;
pub mod sp;
pub mod split;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

use std::path::Path;

use thiserror::Error;

/// Crate-wide error type. CLI exit codes map onto the variants: usage errors
/// are handled by the argument parser, `Parse`/`Io`/`Data` are data errors,
/// `Numeric` signals a numerical failure such as a NaN loss.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub use store::{EntityId, Partitions, RelationId, Triple, TripleStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
