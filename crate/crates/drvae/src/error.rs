use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
