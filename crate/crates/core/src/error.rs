use thiserror::Error;

use crate::simnet::NodeId;
use crate::store::Addr;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the database.
///
/// Each variant maps to a stable upper-case code (see [`Error::code`]) that
/// the CLI prints verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("node {0} unreachable")]
    NodeUnreachable(NodeId),
    #[error("duplicate rpc request id {0}")]
    DuplicateRequest(u64),
    #[error("no rpc service named {0:?}")]
    NoSuchService(String),
    #[error("store paused: a region has no live replica")]
    StorePaused,
    #[error("out of space")]
    OutOfSpace,
    #[error("bad object size {0}")]
    BadSize(usize),
    #[error("invalid address {0}")]
    InvalidAddr(Addr),
    #[error("transaction aborted on conflict")]
    Conflict,
    #[error("transaction is not active")]
    TxnNotActive,
    #[error("transaction is read-only")]
    ReadOnly,
    #[error("snapshot {0} is no longer retained")]
    SnapshotTooOld(u64),
    #[error("duplicate key")]
    DuplicateKey,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("name exists: {0}")]
    NameExists(String),
    #[error("{0} is being deleted")]
    Deleting(String),
    #[error("bad state transition: {0}")]
    BadTransition(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate edge")]
    DuplicateEdge,
    #[error("parse error at {pos}: {msg}")]
    Parse { pos: String, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("unknown type {0:?}")]
    UnknownType(String),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("query working set exceeded budget of {0} bytes")]
    FastFailBudget(usize),
    #[error("query coordinator lost its snapshot")]
    SnapshotLost,
    #[error("continuation token expired")]
    TokenExpired,
    #[error("continuation token invalid")]
    TokenInvalid,
    #[error("task claim lost")]
    ClaimLost,
    #[error("corrupt durable table: {0}")]
    CorruptTable(String),
    #[error("durable store has no watermark")]
    MissingWatermark,
    #[error("durable store unavailable")]
    Outage,
    #[error("corrupt object: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Stable error code, e.g. `ABORTED_CONFLICT` or `PARSE_ERROR`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::NodeUnreachable(_) => "NODE_UNREACHABLE",
            Error::DuplicateRequest(_) => "DUPLICATE_REQUEST",
            Error::NoSuchService(_) => "NO_SUCH_SERVICE",
            Error::StorePaused => "STORE_PAUSED",
            Error::OutOfSpace => "OUT_OF_SPACE",
            Error::BadSize(_) => "BAD_SIZE",
            Error::InvalidAddr(_) => "INVALID_ADDR",
            Error::Conflict => "ABORTED_CONFLICT",
            Error::TxnNotActive => "TXN_NOT_ACTIVE",
            Error::ReadOnly => "READ_ONLY",
            Error::SnapshotTooOld(_) => "SNAPSHOT_TOO_OLD",
            Error::DuplicateKey => "DUPLICATE_KEY",
            Error::NotFound(_) => "NOT_FOUND",
            Error::NameExists(_) => "NAME_EXISTS",
            Error::Deleting(_) => "DELETING",
            Error::BadTransition(_) => "BAD_TRANSITION",
            Error::SchemaViolation(_) => "SCHEMA_VIOLATION",
            Error::DuplicateEdge => "DUPLICATE_EDGE",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::UnknownKey(_) => "UNKNOWN_KEY",
            Error::UnknownType(_) => "UNKNOWN_TYPE",
            Error::UnknownField(_) => "UNKNOWN_FIELD",
            Error::FastFailBudget(_) => "FAST_FAIL_BUDGET",
            Error::SnapshotLost => "SNAPSHOT_LOST",
            Error::TokenExpired => "TOKEN_EXPIRED",
            Error::TokenInvalid => "TOKEN_INVALID",
            Error::ClaimLost => "CLAIM_LOST",
            Error::CorruptTable(_) => "CORRUPT_TABLE",
            Error::MissingWatermark => "MISSING_WATERMARK",
            Error::Outage => "DURABLE_OUTAGE",
            Error::Corrupt(_) => "CORRUPT_OBJECT",
            Error::Io(_) => "IO_ERROR",
        }
    }

    /// True for errors a retry-until-commit loop should retry.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Conflict)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn corrupt(what: impl Into<String>) -> Error {
    Error::Corrupt(what.into())
}
