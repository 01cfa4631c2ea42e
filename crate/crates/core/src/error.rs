use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("`{0}` is not a registered special token")]
    UnknownSpecial(String),
    #[error("sentence {line} has {len} tokens, more than the batch limit of {max}")]
    SentenceTooLong { line: usize, len: usize, max: usize },
    #[error("tensor `{name}`: {detail}")]
    Tensor { name: String, detail: String },
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("natural parallel data is not allowed here: {0}")]
    NaturalDataPresent(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
