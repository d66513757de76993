use thiserror::Error;

/// Errors raised by the library.
///
/// The variants split along the line the CLI cares about: `Input`,
/// `Unsupported` and `Resource` are validation failures, the rest are
/// numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("empty domain: no accepted samples after {proposals} proposals")]
    EmptyDomain { proposals: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("tracked point left the padded grid during step {step} (t = {time}); use more steps or a wider pad")]
    BlowUp { step: usize, time: f64 },

    #[error("boundary polyline self-intersects after step {step}")]
    Topology { step: usize },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures of the numerics rather than of the request.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Convergence { .. }
                | Error::BlowUp { .. }
                | Error::Topology { .. }
                | Error::EmptyDomain { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
