use thiserror::Error;

/// Errors raised anywhere in the simulation, preprocessing, augmentation and
/// learning chain.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates a stated invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data is malformed, non-finite or inconsistently shaped.
    #[error("data error: {0}")]
    Data(String),

    /// The requested allocation exceeds the configured cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Range-cell selection found no energy to select.
    #[error("no energy in range/slow-time map")]
    NoEnergy,

    /// A non-finite value appeared during computation.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Min-max normalization of a constant input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The FLM hit its iteration cap before every neuron fired.
    #[error("FLM stopped after {steps} steps with {fired}/{total} neurons fired")]
    IncompleteCoverage {
        steps: usize,
        fired: usize,
        total: usize,
        /// Partial first-fire times, row-major, 0 where a neuron never fired.
        partial: Vec<u32>,
    },

    /// Tensor shapes do not compose.
    #[error("graph error: {0}")]
    Graph(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
