use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("rank-deficient design: columns {columns:?} are linearly dependent on earlier columns")]
    RankDeficient { columns: Vec<usize> },

    #[error("numerical failure at iteration {iteration}: {reason} (objective = {objective}, grad_norm = {grad_norm})")]
    NumericalFailure {
        reason: String,
        iteration: usize,
        objective: f64,
        grad_norm: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible simulation spec: {requested} events requested but at most {max_feasible} fit in the session")]
    SpecInfeasible { requested: usize, max_feasible: usize },

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::EmptyData(_) | Error::Io(_) => 2,
            Error::NumericalFailure { .. } | Error::DegenerateFit(_) | Error::RankDeficient { .. } => 3,
            Error::InsufficientData(_) | Error::DegenerateInput(_) => 4,
            _ => 1,
        }
    }
}
