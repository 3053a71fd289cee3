//! Error type shared across the crate.

/// Crate-wide error enum. Variants map onto the CLI's distinct exit codes:
/// config errors, data/schema errors, and numeric failures stay separable all
/// the way to the process boundary.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("format: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn io_msg(msg: impl Into<String>) -> Self {
        Error::Io(std::io::Error::other(msg.into()))
    }
}
