use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("view list is empty")]
    EmptyViewList,

    #[error("non-finite input")]
    NonFiniteInput,
    #[error("episode is over (timestep {timestep} >= horizon {horizon})")]
    EpisodeOver { timestep: usize, horizon: usize },
    #[error("configuration is not admissible: {0}")]
    InadmissibleConfiguration(String),

    #[error("diversity batch needs at least 2 configurations, got {0}")]
    BatchTooSmall(usize),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("k = {k} out of range for a store of {rows} rows")]
    KOutOfRange { k: usize, rows: usize },
    #[error("no candidates to select from")]
    EmptyCandidates,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("bad response: {0}")]
    BadResponse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
