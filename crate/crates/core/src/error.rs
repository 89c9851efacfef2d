use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty sequence: cannot pool over zero time steps")]
    EmptySequence,

    #[error("input too short: {got} samples, the encoder needs at least {min}")]
    InputTooShort { got: usize, min: usize },

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("no exit fits budget {kind}<={limit}; cheapest exit `{cheapest}` costs {cost}")]
    BudgetInfeasible {
        kind: String,
        limit: u64,
        cheapest: String,
        cost: u64,
    },

    #[error("unknown exit `{0}`")]
    UnknownExit(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("architecture mismatch: checkpoint hash {found:#010x}, config hash {expected:#010x}")]
    ArchitectureMismatch { expected: u32, found: u32 },

    #[error("tensor table mismatch for `{name}`: {detail}")]
    TensorTable { name: String, detail: String },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("malformed wav header in {path}: {detail}")]
    WavMalformed { path: PathBuf, detail: String },

    #[error("unsupported wav encoding in {path}: {detail}")]
    WavUnsupported { path: PathBuf, detail: String },

    #[error("no manifest row for {0}")]
    MissingManifestRow(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
