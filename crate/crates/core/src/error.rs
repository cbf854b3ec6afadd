use thiserror::Error;

use crate::model::DguId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter for {context}: {reason}")]
    InvalidParameter { context: String, reason: String },

    #[error("degenerate line {a}-{b}: impedance magnitude is zero")]
    DegenerateLine { a: DguId, b: DguId },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: String,
        found: String,
    },

    #[error("malformed LMI program: {0}")]
    Lmi(String),

    #[error("synthesis failed for DGU {dgu}: {reason}")]
    Synthesis { dgu: DguId, reason: String },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("structure check failed: {0}")]
    Structure(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("integration diverged at t = {time} s")]
    Divergence { time: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DegenerateLine { .. } => "degenerate_line",
            Error::Topology(_) => "topology",
            Error::Shape { .. } => "shape",
            Error::Lmi(_) => "lmi",
            Error::Synthesis { .. } => "synthesis",
            Error::Assumption(_) => "assumption",
            Error::Structure(_) => "structure",
            Error::Scenario(_) => "scenario",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn param(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
