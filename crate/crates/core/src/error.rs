use thiserror::Error;

/// Errors raised anywhere in the learning, abstraction and verification chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {dim} = {value} lies outside the domain [{lower}, {upper}]")]
    OutOfDomain {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("dataset of {n} samples exceeds the dense cap of {cap}")]
    DataTooLarge { n: usize, cap: usize },

    #[error("inconsistent partition scheme: {0}")]
    InconsistentScheme(String),

    #[error("infeasible inner problem: {0}")]
    Infeasible(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// `2` validation, `4` numerical failure, `1` anything else. Exit code
    /// `3` (non-convergence) is not an error; see `ValueBounds::converged`.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Invalid(_)
            | Error::OutOfDomain { .. }
            | Error::InconsistentScheme(_)
            | Error::DataTooLarge { .. }
            | Error::Parse(_) => 2,
            Error::NumericalFailure(_) | Error::Infeasible(_) => 4,
            _ => 1,
        }
    }
}
