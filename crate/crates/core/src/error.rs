use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: bad magic bytes {found:?}, expected \"VCF1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFiniteValue { frame: usize, dim: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing file for utterance {utterance}: {path}")]
    MissingFile { utterance: String, path: PathBuf },

    #[error("utterance {utterance}: manifest says {expected} frames, {kind} file has {found}")]
    FrameCountMismatch {
        utterance: String,
        kind: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("utterance {utterance} references unknown speaker {speaker}")]
    UnknownSpeaker { utterance: String, speaker: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("sequence too short: {frames} frames, need at least {min}")]
    SequenceTooShort { frames: usize, min: usize },

    #[error("non-finite loss at step {step} (batch: {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<String> },

    #[error("model conditions on a speaker embedding but none was given")]
    MissingEmbedding,

    #[error("model does not take a speaker embedding but one was given")]
    UnexpectedEmbedding,

    #[error("system {0} requires a speaker embedder checkpoint")]
    MissingEmbedder(String),

    #[error("negative loss input: {0}")]
    NegativeLossInput(f64),

    #[error("wrong checkpoint stage: expected {expected}, found {found}")]
    WrongStage {
        expected: &'static str,
        found: &'static str,
    },

    #[error("adaptation data must come from one speaker, found {0:?}")]
    MultipleSpeakers(Vec<String>),

    #[error("insufficient voiced frames: {found} (need {min})")]
    InsufficientVoicedFrames { found: usize, min: usize },

    #[error("average (non-adapted) checkpoint used for conversion without override")]
    AverageCheckpoint,

    #[error("no overlapping frames to evaluate")]
    EmptyOverlap,

    #[error("no parallel reference for utterance {0}")]
    MissingReference(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
