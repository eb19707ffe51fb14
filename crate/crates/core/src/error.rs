use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("all log-weights are -inf or NaN")]
    DegenerateWeights,

    #[error("degenerate merge at node [{start}, {end}]: every particle has zero weight")]
    DegenerateMerge { start: usize, end: usize },

    #[error("degenerate filter at step {step}: all emission weights are zero")]
    DegenerateFilter { step: usize },

    #[error("degenerate backward pass at step {step}: zero normalising denominator")]
    DegenerateBackward { step: usize },

    #[error("leaf density at index {index} is not integrable on the working grid (boundary mass fraction {boundary_mass:.3e})")]
    LeafNotIntegrable { index: usize, boundary_mass: f64 },

    #[error("impossible observation at step {step}: zero total likelihood on the grid")]
    ImpossibleObservation { step: usize },

    #[error("invalid proposal: product proposal is zero where the joint is positive (cell {row}, {col})")]
    InvalidProposal { row: usize, col: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("replication {replication}: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by weight collapse during a run, as opposed
    /// to bad input or configuration.
    pub fn is_degenerate(&self) -> bool {
        match self {
            Error::DegenerateWeights
            | Error::DegenerateMerge { .. }
            | Error::DegenerateFilter { .. }
            | Error::DegenerateBackward { .. }
            | Error::LeafNotIntegrable { .. }
            | Error::ImpossibleObservation { .. } => true,
            Error::Replication { source, .. } => source.is_degenerate(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedModel(_) => true,
            Error::Replication { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
