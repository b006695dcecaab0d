use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("schema violation in table `{table}`{}: {message}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    SchemaViolation {
        table: String,
        row: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("unknown table `{0}`")]
    UnknownTable(String),

    #[error("unknown column `{column}` in table `{table}`")]
    UnknownColumn { table: String, column: String },

    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    #[error("row {row} out of range for table `{table}` ({len} rows)")]
    RowOutOfRange { table: String, row: usize, len: usize },

    #[error("mask target not present in serialized row: {0}")]
    MaskTargetNotInRow(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid seed node {node} (graph has {num_nodes} nodes)")]
    InvalidSeedNode { node: usize, num_nodes: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("decode length {len} exceeds max_decode_len {max}")]
    TargetTooLong { len: usize, max: usize },

    #[error("length mismatch: {pred} prediction steps vs {target} targets")]
    LengthMismatch { pred: usize, target: usize },

    #[error("optimizer step requested without gradients")]
    MissingGradients,

    #[error("training split is empty")]
    EmptyTrainSplit,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("invalid mask spec: {0}")]
    InvalidMaskSpec(String),

    #[error("phase 2 requires a phase 1 model state")]
    MissingPhase1State,

    #[error("report lacks required variant `{0}`")]
    MissingVariant(String),

    #[error("checkpoint checksum mismatch in {0}")]
    Checksum(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(table: &str, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::SchemaViolation {
            table: table.to_string(),
            row,
            message: message.into(),
        }
    }
}
