use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Provider,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty source: {0}")]
    EmptySource(String),
    #[error("no sources")]
    NoSources,
    #[error("duplicate source ids: {}", .0.join(", "))]
    DuplicateSources(Vec<String>),
    #[error("chunk id collision: {0}")]
    ChunkCollision(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty query")]
    EmptyQuery,
    #[error("unknown chunk: {0}")]
    UnknownChunk(String),
    #[error("empty vector store")]
    EmptyVectorStore,
    #[error("dimension mismatch for {id}: expected {expected}, found {found}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("no runs to pool")]
    NoRuns,
    #[error("query {0} missing from query metadata")]
    MissingQuery(String),
    #[error("grade out of range: {0}")]
    GradeOutOfRange(i64),
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("chunk {chunk_id} is not part of task {task_id}")]
    ChunkNotInTask { task_id: String, chunk_id: String },
    #[error("incomplete submission for task {task_id}: {missing} documents unlabeled")]
    IncompleteSubmission { task_id: String, missing: usize },
    #[error("under-annotated: {found} judgments, {required} required")]
    UnderAnnotated { found: usize, required: usize },
    #[error("kappa undefined")]
    KappaUndefined,
    #[error("unequal rating counts: item {item} has {found} ratings, expected {expected}")]
    UnequalRatings {
        item: usize,
        found: usize,
        expected: usize,
    },
    #[error("no relevant documents")]
    NoRelevant,
    #[error("run and qrels share no queries")]
    NoOverlap,
    #[error("nothing to summarize")]
    NothingToSummarize,
    #[error("not enough demonstrations: {requested} requested, {available} available")]
    NotEnoughDemos { requested: usize, available: usize },
    #[error("prompt for {query_id} exceeds context window: {estimate} > {window} tokens")]
    OverBudget {
        query_id: String,
        estimate: usize,
        window: usize,
    },
    #[error("empty generation")]
    EmptyGeneration,
    #[error("provider failed for {query_id} after {attempts} attempts: {last}")]
    ProviderExhausted {
        query_id: String,
        attempts: u32,
        last: String,
    },
    #[error("no rows to report")]
    EmptyReport,
    #[error("invalid template: {0}")]
    Template(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("index format: {0}")]
    IndexFormat(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Template(_) | Error::NotEnoughDemos { .. } => {
                ErrorKind::Config
            }
            Error::ProviderExhausted { .. } | Error::EmptyGeneration => ErrorKind::Provider,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
