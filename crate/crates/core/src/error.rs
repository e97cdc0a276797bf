use thiserror::Error;

#[derive(Debug, Error)]
pub enum LduError {
    #[error("register must contain at least one site")]
    EmptyRegister,
    #[error("register of {0} sites exceeds the dense-engine limit")]
    TooManySites(usize),
    #[error("site {site} out of range for a {n}-site register")]
    SiteOutOfRange { site: usize, n: usize },
    #[error("site {0} listed more than once")]
    RepeatedSite(usize),
    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NotUnitary(f64),
    #[error("matrix dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation requires {0} mode")]
    ModeMismatch(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("circuit contains steps that have no unitary: {0}")]
    NotUnitaryCircuit(String),
    #[error("process matrix is only defined for standard LDU kinds")]
    NonStandardKind,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LduError>;
