//! Error types shared across the toolkit.

use std::path::PathBuf;

use thiserror::Error;

/// Schema mismatch reason reported by compatibility checks.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchKind {
    MissingInA,
    MissingInB,
    Shape,
    Dtype,
}

impl std::fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::MissingInA => write!(f, "missing-in-A"),
            Self::MissingInB => write!(f, "missing-in-B"),
            Self::Shape => write!(f, "shape"),
            Self::Dtype => write!(f, "dtype"),
        }
    }
}

/// One schema difference between two checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Mismatch {
    pub name: String,
    pub reason: MismatchKind,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String },

    #[error("header length {size} exceeds maximum {max} bytes")]
    HeaderTooLarge { size: u64, max: u64 },

    #[error("tensor `{tensor}`: unknown dtype tag `{tag}`")]
    UnknownDtype { tensor: String, tag: String },

    #[error(
        "tensor `{tensor}`: data_offsets [{begin}, {end}) disagree with \
         dtype/shape byte length {expected}"
    )]
    OffsetMismatch {
        tensor: String,
        begin: u64,
        end: u64,
        expected: u64,
    },

    #[error("tensors `{first}` and `{second}` overlap at data byte {position}")]
    OffsetOverlap {
        first: String,
        second: String,
        position: u64,
    },

    #[error(
        "truncated file: tensor `{tensor}` data ends at byte {end_position} \
         but the file holds {available} data bytes"
    )]
    Truncated {
        tensor: String,
        end_position: u64,
        available: u64,
    },

    #[error("tensor `{tensor}`: stored byte length {got} does not match spec length {expected}")]
    LengthMismatch {
        tensor: String,
        expected: u64,
        got: u64,
    },

    #[error("tensor name `{name}` is reserved")]
    ReservedName { name: String },

    #[error("incompatible schemas ({context}): {} mismatch(es), first: {first}", .mismatches.len())]
    SchemaMismatch {
        context: String,
        first: String,
        mismatches: Vec<Mismatch>,
    },

    #[error("layer pattern `{pattern}` invalid: {reason}")]
    InvalidPattern { pattern: String, reason: String },

    #[error("non-contiguous layer indices: index {missing} absent below maximum {max}")]
    NonContiguousLayers { missing: usize, max: usize },

    #[error("no layers matched the pattern; a layerwise scheme needs at least one layer")]
    NoLayers,

    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndexOutOfRange { index: usize, layers: usize },

    #[error("non-finite value in tensor `{tensor}` at element {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("delta family `{got}` does not match profile family `{expected}`")]
    FamilyMismatch { expected: String, got: String },

    #[error("log scheme undefined for single layer")]
    LogSingleLayer,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error("fixture error: {0}")]
    Fixture(String),
}

impl Error {
    /// Stable machine-readable tag for each error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::MalformedHeader { .. } => "malformed-header",
            Self::HeaderTooLarge { .. } => "header-too-large",
            Self::UnknownDtype { .. } => "unknown-dtype",
            Self::OffsetMismatch { .. } => "offset-mismatch",
            Self::OffsetOverlap { .. } => "offset-overlap",
            Self::Truncated { .. } => "truncated",
            Self::LengthMismatch { .. } => "length-mismatch",
            Self::ReservedName { .. } => "reserved-name",
            Self::SchemaMismatch { .. } => "schema-mismatch",
            Self::InvalidPattern { .. } => "invalid-pattern",
            Self::NonContiguousLayers { .. } => "non-contiguous-layers",
            Self::NoLayers => "no-layers",
            Self::LayerIndexOutOfRange { .. } => "layer-index-out-of-range",
            Self::NonFinite { .. } => "non-finite",
            Self::FamilyMismatch { .. } => "family-mismatch",
            Self::LogSingleLayer => "log-single-layer",
            Self::InvalidParameter { .. } => "invalid-parameter",
            Self::Recipe(_) => "recipe",
            Self::Fixture(_) => "fixture",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
