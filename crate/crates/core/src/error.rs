use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite voxel value in slice {slice}")]
    NonFinite { slice: usize },

    #[error("loss or gradient became non-finite")]
    NonFiniteLoss,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage}, epoch {epoch}; last good checkpoint: {last_good:?}")]
    Diverged {
        stage: u8,
        epoch: usize,
        last_good: Option<PathBuf>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
