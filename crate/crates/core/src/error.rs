//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not positive definite (leading minor {index}); raise the dampening lambda")]
    SingularMatrix { index: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("malformed model: {0}")]
    Malformed(String),

    #[error("unsupported operator '{op_type}' (node '{node}')")]
    UnsupportedOperator { op_type: String, node: String },

    #[error("shape error at node '{node}': {detail}")]
    Shape { node: String, detail: String },

    #[error("unknown graph node: {0}")]
    UnknownNode(String),

    #[error("channel {channel} out of range for '{node}' axis {axis} (extent {extent})")]
    ChannelRange { node: String, axis: usize, channel: usize, extent: usize },

    #[error("'{node}' has no prunable output axis")]
    NotPrunable { node: String },

    #[error("no propagation rule for {op_type} value slot '{slot}' axis {axis} (node '{node}')")]
    NoRule { op_type: String, slot: String, axis: usize, node: String },

    #[error("score import: {0}")]
    ScoreImport(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("target reduction {target:.3}x unreachable; maximum achievable is {max_achievable:.3}x")]
    TargetUnreachable { target: f64, max_achievable: f64 },

    #[error("solver failure in layer '{layer}': {detail}")]
    Solver { layer: String, detail: String },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("protobuf decode: {0}")]
    ProtoDecode(#[from] prost::DecodeError),
}
