use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reserved position not found")]
    ReservedPositionNotFound,
    #[error("degenerate foreign vector")]
    DegenerateVector,
    #[error("zero-norm input")]
    ZeroNorm,
    #[error("no negatives")]
    NoNegatives,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("reserved slot layout: {0}")]
    SlotLayout(String),
    #[error("no response tokens")]
    NoResponseTokens,
    #[error("unknown template id: {0}")]
    UnknownTemplate(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("corpus likely mis-formatted ({malformed} of {total} lines malformed)")]
    MisFormatted { malformed: usize, total: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("every example in the batch was skipped")]
    AllSkipped,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("output already exists: {0} (pass --overwrite to replace it)")]
    OutputExists(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Toml(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
