//! Error type shared across the library.

use thiserror::Error;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("edge ({u}, {v}) out of range for {num_nodes} nodes")]
    EdgeOutOfRange { u: usize, v: usize, num_nodes: usize },

    #[error("duplicate edge ({u}, {v})")]
    DuplicateEdge { u: usize, v: usize },

    #[error("self-loop on node {node}; the input graph must not contain self-loops")]
    SelfLoop { node: usize },

    #[error("node {node} appears in more than one of train/val/test masks")]
    MaskOverlap { node: usize },

    #[error("mask entry {node} out of range for {num_nodes} nodes")]
    MaskOutOfRange { node: usize, num_nodes: usize },

    #[error("feature matrix has {found} rows, expected {expected}")]
    FeatureRows { expected: usize, found: usize },

    #[error("feature row {row} has {found} entries, expected {expected}")]
    FeatureWidth { row: usize, expected: usize, found: usize },

    #[error("label list has {found} entries, expected {expected}")]
    LabelCount { expected: usize, found: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("node id {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("empty node set for {context}")]
    EmptyNodeSet { context: &'static str },

    #[error("non-finite value encountered in {context}; training or evaluation diverged")]
    NonFinite { context: &'static str },

    #[error("inverse-Hessian recursion diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(
        "scaled damped operator has spectral norm {norm:.6} > 1 with scale {scale}; \
         decrease the scale factor"
    )]
    SpectralScale { norm: f64, scale: f64 },

    #[error("parameter count {p} exceeds dense materialization limit {max}")]
    SizeLimit { p: usize, max: usize },

    #[error("candidate pool has {pool} nodes, cannot acquire {requested}")]
    PoolTooSmall { pool: usize, requested: usize },

    #[error("linear system is singular and cannot be solved")]
    Singular,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
            Error::EdgeOutOfRange { .. } => "edge_out_of_range",
            Error::DuplicateEdge { .. } => "duplicate_edge",
            Error::SelfLoop { .. } => "self_loop",
            Error::MaskOverlap { .. } => "mask_overlap",
            Error::MaskOutOfRange { .. } => "mask_out_of_range",
            Error::FeatureRows { .. } => "feature_rows",
            Error::FeatureWidth { .. } => "feature_width",
            Error::LabelCount { .. } => "label_count",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NodeOutOfRange { .. } => "node_out_of_range",
            Error::EmptyNodeSet { .. } => "empty_node_set",
            Error::NonFinite { .. } => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::SpectralScale { .. } => "spectral_scale",
            Error::SizeLimit { .. } => "size_limit",
            Error::PoolTooSmall { .. } => "pool_too_small",
            Error::Singular => "singular",
            Error::InvalidConfig(_) => "invalid_config",
        }
    }
}
