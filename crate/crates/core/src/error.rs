use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid model, prior or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model evaluation produced a non-finite value.
    #[error("non-finite value at index {index}: {what}")]
    Numeric { index: usize, what: String },

    /// Every combined weight underflowed to zero.
    #[error("all particle weights are zero")]
    AllWeightsZero,

    /// No candidate kernel parameter produced a usable posterior.
    #[error("kernel tuning failed: every candidate produced zero total weight")]
    TuningFailed,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
