use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence too short: need at least {needed} entries, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("scenario has no observed states")]
    EmptyObservation,

    #[error("least-squares system is rank deficient (numerical rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("multiplier search did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("every importance weight is zero and the point estimate is itself infeasible")]
    AllWeightsZero,

    #[error("ground-truth lead future requested but the scenario carries none")]
    MissingLeadFuture,

    #[error("ground-truth lag position missing at step {index}")]
    MissingTruth { index: usize },

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("unknown unit `{0}` (expected `meters` or `feet`)")]
    Unit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for the CLI error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SequenceTooShort { .. } => "SequenceTooShort",
            Error::EmptyObservation => "EmptyObservation",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::AllWeightsZero => "AllWeightsZero",
            Error::MissingLeadFuture => "MissingLeadFuture",
            Error::MissingTruth { .. } => "MissingTruth",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::InvalidScenario(_) => "InvalidScenario",
            Error::Parse { .. } => "ParseError",
            Error::Unit(_) => "UnitError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
