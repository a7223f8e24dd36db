use thiserror::Error;

pub type Result<T> = std::result::Result<T, Bd3Error>;

#[derive(Debug, Error)]
pub enum Bd3Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate time: alpha_t = 1 at t = {0}")]
    DegenerateTime(f64),

    #[error("attention mask row {row} has no allowed keys")]
    MaskDegenerate { row: usize },

    #[error("cache alignment error: {0}")]
    CacheAlignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("zero-probability transition at position {position}: NLL is infinite")]
    ZeroProbability { position: usize },

    #[error("NaN encountered in {0}")]
    NotANumber(&'static str),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Bd3Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Bd3Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Bd3Error::Config(msg.into())
    }
}
