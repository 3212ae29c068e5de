use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("infeasible CTC target: {target_len} labels ({repeats} adjacent repeats) need {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        repeats: usize,
        required: usize,
        frames: usize,
    },

    #[error("brute-force oracle bound exceeded: {0}")]
    OracleBound(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("no DID source available: {0}")]
    Capability(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("context error: prefix of length {len} exceeds context {context}")]
    Context { len: usize, context: usize },

    #[error("corpus error at line {line}: {detail}")]
    Corpus { line: usize, detail: String },

    #[error("alignment infeasible: {0}")]
    AlignmentInfeasible(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn for_utterance(self, id: impl Into<String>) -> Self {
        Error::Utterance {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by input data rather than configuration or
    /// runtime faults.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::InfeasibleTarget { .. }
            | Error::Corpus { .. }
            | Error::Label(_)
            | Error::Format { .. }
            | Error::AlignmentInfeasible(_)
            | Error::Split(_)
            | Error::InputTooShort { .. } => true,
            Error::Utterance { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
