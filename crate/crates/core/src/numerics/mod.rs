//! Dense tensors, a reverse-mode compute graph, Adam, and checkpoint I/O.
//!
//! All types are generic over the element type through [`Scalar`]; the crate
//! root re-exports `f64` aliases.

mod adam;
mod check;
mod checkpoint;
mod graph;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use check::finite_diff_check;
pub use checkpoint::{Checkpoint, ParamMap, CHECKPOINT_SCHEMA_VERSION};
pub use graph::{Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::{argmax, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph node {0} references a node that does not precede it")]
    Cycle(usize),
    #[error("unknown graph node {0}")]
    UnknownNode(usize),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint schema version {found:?}, expected {expected:?}")]
    SchemaVersion { expected: &'static str, found: String },
}
