use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// configuration/validation problems, numerical failures (non-finite
/// values) and solver non-convergence are kept distinguishable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value{context}")]
    NonFinite { op: String, context: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("SMO did not converge after {iterations} iterations (KKT violation {kkt_violation:.3e}, tol {tol:.3e})")]
    NotConverged {
        iterations: usize,
        kkt_violation: f64,
        tol: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            context: String::new(),
        }
    }

    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::NonFinite { op, context } => {
                let context = if context.is_empty() {
                    format!(" ({})", ctx.as_ref())
                } else {
                    format!("{}; {}", context.trim_end_matches(')'), ctx.as_ref()) + ")"
                };
                Error::NonFinite { op, context }
            }
            other => other,
        }
    }
}
