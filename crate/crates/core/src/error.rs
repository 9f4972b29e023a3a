use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("mesh structure: {0}")]
    MeshStructure(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    /// The face region projects entirely outside the frame; the caller should
    /// skip the face discriminator for this sample.
    #[error("face region fully out of frame")]
    FaceOutOfFrame,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric/invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_)
            | Error::Image(_) => 3,
            Error::Dimension(_)
            | Error::Autodiff(_)
            | Error::MeshStructure(_)
            | Error::Invariant(_)
            | Error::Numeric(_)
            | Error::FaceOutOfFrame => 4,
        }
    }
}
