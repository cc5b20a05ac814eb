use thiserror::Error;

#[derive(Debug, Error)]
pub enum EchoError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this graph; record a new forward pass first")]
    StaleGraph,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("token id {id} at index {index} is out of range for vocab {vocab}")]
    Vocab {
        id: usize,
        index: usize,
        vocab: usize,
    },
    #[error("keys cover {keys} positions but queries reach position {needed}")]
    CacheCoverage { keys: usize, needed: usize },
    #[error("decode cache is full ({capacity} positions)")]
    Capacity { capacity: usize },
    #[error("cannot convert layer {layer}: {reason}")]
    ConversionOrder { layer: usize, reason: String },
    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("frozen parameter `{0}` changed during a stage")]
    FreezeViolation(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"ECHO\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor manifest mismatch: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, EchoError>;
