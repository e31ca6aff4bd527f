//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("learning-rate decay rate {0} outside [0, 1)")]
    InvalidDecayRate(f64),
    #[error("adversarial ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("infeasible partition: {clients} clients x {classes_per_client} classes cannot cover {num_classes} classes")]
    InfeasiblePartition {
        clients: usize,
        classes_per_client: usize,
        num_classes: usize,
    },
    #[error("degenerate similarity: zero-norm last-layer vector for {0}")]
    DegenerateSimilarity(String),
    #[error("non-finite parameters after aggregation at round {round} with strategy {strategy}")]
    NanAbort { round: usize, strategy: String },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error("layer index {layer} out of range for depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("rank-deficient input to svcca")]
    RankDeficient,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
