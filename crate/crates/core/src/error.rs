use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Assumption and certificate failures that the analysis is expected to
/// report (rather than abort on) are carried in report structures instead.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown key: {0}")]
    Key(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("structural condition failed: {0}")]
    Structure(String),
    #[error("iteration limit reached after {iterations} steps (residual {residual:e})")]
    Iteration { iterations: usize, residual: f64 },
    #[error("unstable closed loop: {0}")]
    Stability(String),
    #[error("non-finite value at step {step}")]
    Numerical { step: usize },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("node {node}: {source}")]
    AtNode { node: usize, source: Box<GridError> },
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

impl From<std::io::Error> for GridError {
    fn from(e: std::io::Error) -> Self {
        GridError::Io(e.to_string())
    }
}

impl From<toml::de::Error> for GridError {
    fn from(e: toml::de::Error) -> Self {
        GridError::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for GridError {
    fn from(e: toml::ser::Error) -> Self {
        GridError::Parse(e.to_string())
    }
}

impl From<csv::Error> for GridError {
    fn from(e: csv::Error) -> Self {
        GridError::Parse(e.to_string())
    }
}

impl GridError {
    /// Short type name used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            GridError::Config(_) => "ConfigError",
            GridError::Key(_) => "KeyError",
            GridError::Dimension { .. } => "DimensionError",
            GridError::Domain(_) => "DomainError",
            GridError::Range(_) => "RangeError",
            GridError::Convergence { .. } => "ConvergenceError",
            GridError::AssumptionViolation(_) => "AssumptionViolation",
            GridError::Structure(_) => "StructureError",
            GridError::Iteration { .. } => "IterationError",
            GridError::Stability(_) => "StabilityError",
            GridError::Numerical { .. } => "NumericalError",
            GridError::Io(_) => "IoError",
            GridError::Parse(_) => "ParseError",
            GridError::AtNode { source, .. } => source.kind(),
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            GridError::Config(_)
            | GridError::Key(_)
            | GridError::Parse(_)
            | GridError::Range(_) => 2,
            GridError::Convergence { .. } | GridError::Iteration { .. } => 3,
            GridError::Stability(_)
            | GridError::AssumptionViolation(_)
            | GridError::Structure(_) => 4,
            GridError::AtNode { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
