use thiserror::Error;

pub type Result<T> = std::result::Result<T, KrnetError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KrnetError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("singular {context}: |pivot| = {value:e} below threshold")]
    Singular { context: String, value: f64 },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("stale cache: {0}")]
    StaleCache(&'static str),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<KrnetError>,
    },

    #[error("input outside the domain of {context}: {value}")]
    Domain { context: &'static str, value: f64 },

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("missing normalizer for target `{0}`")]
    MissingNormalizer(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{0}")]
    Unsupported(String),
}

impl KrnetError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        KrnetError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_layer(self, index: usize, kind: &'static str) -> Self {
        KrnetError::Layer {
            index,
            kind,
            source: Box::new(self),
        }
    }

    /// True for failures caused by floating-point blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            KrnetError::NonFinite { .. }
            | KrnetError::Singular { .. }
            | KrnetError::Diverged { .. } => true,
            KrnetError::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
