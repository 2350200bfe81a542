use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("numerical blowup at token {token}: {detail}")]
    NumericalBlowup { token: usize, detail: String },

    #[error("infeasible regime: {0}")]
    Infeasible(String),

    #[error("not certified: {0}")]
    NotCertified(String),

    #[error("target gamma {target} not reached before t = {t_max}")]
    Timeout { target: f64, t_max: f64 },

    #[error("invalid experiment spec: {}", .0.join("; "))]
    SpecValidation(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalBlowup { .. } => 3,
            _ => 1,
        }
    }
}
