use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input violating an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),
    /// A caller broke an API contract (e.g. batch sampled under another snapshot).
    #[error("contract error: {0}")]
    Contract(String),
    /// Fewer retained instances than requested.
    #[error("only {available} retained instances, {requested} requested (short by {})", requested - available)]
    Shortfall { requested: usize, available: usize },
    /// Parameters or gradient became non-finite during training.
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    /// Malformed line in a record file.
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    /// Record file written with an incompatible schema.
    #[error("schema mismatch in {path}: expected {expected} v{expected_version}, found {found}")]
    Schema {
        path: PathBuf,
        expected: String,
        expected_version: u32,
        found: String,
    },
    /// Judge backend failure.
    #[error("judge error: {0}")]
    Judge(String),
    /// Judge failed part-way; carries the judgments completed before the failure.
    #[error("judge failed after {} completed judgments: {message}", completed.len())]
    PartialJudge {
        message: String,
        completed: Vec<crate::judge::SimilarityJudgment>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
