use thiserror::Error;

#[derive(Debug, Error)]
pub enum SepdaError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integration blew up at step {step}{}", sample.map(|s| format!(" of sample {s}")).unwrap_or_default())]
    BlowUp { step: usize, sample: Option<usize> },

    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    #[error("loss evaluation failed at theta {theta:?}: {source}")]
    Loss {
        theta: Vec<f64>,
        #[source]
        source: Box<SepdaError>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SepdaError> = std::result::Result<T, E>;
