use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("rank-deficient point set: {0}")]
    RankDeficient(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
