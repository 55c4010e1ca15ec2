use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: usize },
    #[error("ingestion error in {file} row {row}: {msg}")]
    Ingestion { file: String, row: usize, msg: String },
    #[error("unknown mechanism `{0}`")]
    UnknownMechanism(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MarketError>;

pub(crate) fn config_err(msg: impl Into<String>) -> MarketError {
    MarketError::Config(msg.into())
}
