use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate schedule at t={t}: {msg}")]
    DegenerateSchedule { t: usize, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => 3,
            Error::Divergence(_) | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
