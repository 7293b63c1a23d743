use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("no data rows")]
    EmptyTable,

    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("column `{column}` has only missing values")]
    AllMissing { column: String },

    #[error("column `{column}`, row {row}: cannot parse `{value}` as a number")]
    Unparsable {
        column: String,
        row: usize,
        value: String,
    },

    #[error("column `{column}`: unknown category `{value}` and no UNKNOWN slot")]
    UnknownCategory { column: String, value: String },

    #[error("column `{column}`: level {level} out of range (cardinality {cardinality})")]
    LevelOutOfRange {
        column: String,
        level: usize,
        cardinality: usize,
    },

    #[error("malformed sentence: {0}")]
    Sentence(String),

    #[error("trie: {0}")]
    Trie(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("privacy: {0}")]
    Privacy(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ModelConfig(_) | Error::Checkpoint(_) => 2,
            Error::Numeric(_) | Error::Privacy(_) => 4,
            _ => 3,
        }
    }
}
