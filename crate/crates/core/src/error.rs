use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("aspect offsets {start}..{end} do not align with token boundaries in {text:?}")]
    Alignment {
        text: String,
        start: usize,
        end: usize,
    },

    #[error("invalid polarity label: {0}")]
    Label(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sequence length {len} outside allowed range 1..={max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("adapter method `{0}` has no trainable parameters")]
    NotTrainable(String),

    #[error("re-weighting undefined: ln(M_asp) = {ln_m:.6} must exceed 1 (M_asp = {m_asp})")]
    ReweightUndefined { m_asp: usize, ln_m: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("xml error: {0}")]
    Xml(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
