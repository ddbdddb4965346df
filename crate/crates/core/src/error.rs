use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible dataset spec: {0}")]
    InfeasibleSpec(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("class {0} has no samples; per-class recall is undefined")]
    UndefinedClass(usize),

    #[error("config error{}: {message}", location(*line, key.as_deref()))]
    Config {
        line: Option<usize>,
        key: Option<String>,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(line: Option<usize>, key: Option<&str>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!(" at line {l}, key `{k}`"),
        (Some(l), None) => format!(" at line {l}"),
        (None, Some(k)) => format!(" for key `{k}`"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn config(line: Option<usize>, key: Option<&str>, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            key: key.map(str::to_owned),
            message: message.into(),
        }
    }
}
