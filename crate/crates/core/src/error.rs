use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("divergent energy: {0}")]
    Divergence(String),
    #[error("isolated vertex {0}: kernel row sum is zero")]
    IsolatedVertex(usize),
    #[error("insufficient resolution: {0}")]
    Resolution(String),
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),
    #[error("infinite energy: {0}")]
    InfiniteEnergy(String),
    #[error("no convergence after {iterations} iterations (last change {last_change:e}, residual {residual:e})")]
    Nonconvergence { iterations: usize, last_change: f64, residual: f64 },
    #[error("internal consistency violated: {0}")]
    InternalConsistency(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Divergence(_) => "divergence",
            Error::IsolatedVertex(_) => "isolated_vertex",
            Error::Resolution(_) => "resolution",
            Error::DegenerateSupport(_) => "degenerate_support",
            Error::InfiniteEnergy(_) => "infinite_energy",
            Error::Nonconvergence { .. } => "nonconvergence",
            Error::InternalConsistency(_) => "internal_consistency",
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
