use thiserror::Error;

/// Errors surfaced by parsing, matrix evaluation, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, col {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },

    #[error("duplicate parameter at line {line}: {param}")]
    DuplicateParameter { line: usize, param: String },

    #[error("model is empty after comment stripping")]
    EmptyModel,

    #[error("unknown variable `{0}` in parameter")]
    UnknownVariable(String),

    #[error("(I - A) is singular at the supplied parameter values")]
    SingularSystem,

    #[error("non-finite value in parameter vector at index {0}")]
    NonFiniteParameter(usize),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("spectral radius of the AR/CL block is {0:.4} >= 1; process is not stable")]
    UnstableProcess(f64),

    #[error("no admissible start values after {0} jitter retries")]
    StartValueFailure(usize),

    #[error("sample covariance is not positive definite")]
    NonPdSampleCovariance,

    #[error("column `{0}` required by the model is missing from the data")]
    MissingColumn(String),

    #[error("data has {rows} rows but at least {min} are required")]
    TooFewRows { rows: usize, min: usize },

    #[error("parameter label `{0}` missing from one of the fits")]
    LabelMismatch(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
