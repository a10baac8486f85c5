use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("index {index} out of range for {op} over {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("unknown topic id {0}")]
    UnknownTopic(u32),

    #[error("taxonomy error at node {node}: {reason}")]
    Taxonomy { node: String, reason: String },

    #[error("word vectors line {line}: {reason}")]
    WordVectors { line: usize, reason: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first triple {first_triple})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_triple: usize,
    },

    #[error("stale topic cache: built at parameter version {cached}, parameters now at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("infeasible fixture: {0}")]
    Fixture(String),

    #[error("expansion at parent {parent}: {source}")]
    Position {
        parent: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
