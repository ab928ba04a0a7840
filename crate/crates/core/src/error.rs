use std::io;

use crate::columnar::DataType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report, from schema checks up to the
/// transport layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("row index {index} out of bounds for table with {nrows} rows")]
    IndexOutOfBounds { index: usize, nrows: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("duplicate result column name `{0}`")]
    DuplicateResultName(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("unclosed quote starting on line {line}")]
    UnclosedQuote { line: usize },
    #[error("cannot convert row {row} of column `{column}`: `{text}`")]
    CastFailure { column: String, row: usize, text: String },
    #[error("invalid csv options: {0}")]
    InvalidOptions(String),
    #[error("write to sink failed: {0}")]
    SinkFailure(#[source] io::Error),

    #[error("unsupported cast from {from:?} to {to:?}")]
    UnsupportedCast { from: DataType, to: DataType },
    #[error("column `{column}` has type {actual:?}, expected {expected}")]
    WrongType { column: String, actual: DataType, expected: &'static str },
    #[error("join key arity mismatch: {left} left columns vs {right} right columns")]
    KeyArityMismatch { left: usize, right: usize },
    #[error("key type mismatch: {left:?} vs {right:?}")]
    KeyTypeMismatch { left: DataType, right: DataType },
    #[error("aggregate {agg} is not defined for column `{column}` of type {dtype:?}")]
    NonNumericAggregate { column: String, agg: &'static str, dtype: DataType },
    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    #[error("probe has {keys} distinct keys, limit is {limit}")]
    ProbeTooLarge { keys: usize, limit: usize },
    #[error("column `{column}` has {count} non-null values globally, need at least 2")]
    DegenerateColumn { column: String, count: u64 },

    #[error("rendezvous timed out: {0}")]
    RendezvousTimeout(String),
    #[error("rank collision: {0}")]
    RankCollision(String),
    #[error("protocol version mismatch: local {local}, remote {remote}")]
    VersionMismatch { local: u32, remote: u32 },
    #[error("peer {0} closed the connection")]
    PeerClosed(usize),
    #[error("timed out waiting for message from rank {src} tag {tag}")]
    Timeout { src: usize, tag: u32 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("protocol fault: {0}")]
    ProtocolFault(String),
    #[error("invalid worker spec: {0}")]
    InvalidSpec(String),
    #[error("malformed hostfile line {line}: {reason}")]
    Hostfile { line: usize, reason: String },

    #[error("malformed serialized data: {0}")]
    Decode(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("column `{column}` has a null at row {row}")]
    NullInNumericBridge { column: String, row: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank {rank}: {source}")]
    Rank {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Attaches the worker rank to an error raised inside a collective stage.
    pub fn at_rank(self, rank: usize) -> Self {
        match self {
            e @ Error::Rank { .. } => e,
            other => Error::Rank { rank, source: Box::new(other) },
        }
    }
}
