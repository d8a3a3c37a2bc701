use thiserror::Error;

/// Errors raised by the numerical kernels.
///
/// Every variant maps to a stable machine-readable kind (see [`Error::kind`])
/// which the command-line runner embeds in its reports.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("saturation: {0}")]
    Saturation(String),

    #[error("singular input: {0}")]
    Singular(String),

    #[error("trajectory left the bounding box at t = {time}")]
    Diverged { time: f64 },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("inversion failure: {0}")]
    Inversion(String),

    #[error("truncation: {0}")]
    Truncation(String),

    #[error("quadrature did not converge on [{a}, {b}] (error estimate {estimate:e})")]
    Quadrature { a: f64, b: f64, estimate: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sample budget exceeded: {0}")]
    Budget(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Argument(_) => "argument",
            Error::Saturation(_) => "saturation",
            Error::Singular(_) => "singular",
            Error::Diverged { .. } => "diverged",
            Error::Resolution(_) => "resolution",
            Error::Solver(_) => "solver",
            Error::Inversion(_) => "inversion",
            Error::Truncation(_) => "truncation",
            Error::Quadrature { .. } => "quadrature",
            Error::Numeric(_) => "numeric",
            Error::Budget(_) => "budget",
        }
    }

    /// True for errors caused by bad inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Argument(_) | Error::Domain(_) | Error::Budget(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
