use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("condition error: {0}")]
    Condition(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate time: average velocity is undefined at t = 1")]
    DegenerateTime,

    #[error("degenerate direction: average velocity norm below threshold")]
    DegenerateDirection,

    #[error("capability error: {0}")]
    Capability(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("mass error: frame {frame} has zero total intensity")]
    ZeroMass { frame: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure at denoising step {step} (t = {t}): {what}")]
    Numeric { step: usize, t: f64, what: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that should map to the CLI's numeric-failure exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::NonFinite(_))
    }
}
