use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {what} has length {actual}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate bandwidth: all rows are identical")]
    DegenerateBandwidth,

    #[error("kernel matrix must be centred")]
    NotCentered,

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("empty treatment arm: {0}")]
    EmptyArm(&'static str),

    #[error("failed to converge: {0}")]
    NoConvergence(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("undefined cell mean: {0}")]
    UndefinedCell(String),

    #[error("prompt is missing data for placeholder `{0}`")]
    MissingPlaceholder(&'static str),

    #[error("could not parse oracle reply: {0}")]
    Parse(String),

    #[error("oracle reply rejected: {0}")]
    OracleRejected(String),

    #[error("oracle transport failure: {0}")]
    Transport(String),

    #[error("oracle script error: {0}")]
    Script(String),

    #[error("all grid cells failed: {0}")]
    AllCellsFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
