use std::path::PathBuf;

use cropdet_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("no such input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("config file {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("unknown backend suite `{name}` (available: {available})")]
    UnknownBackend { name: String, available: String },
    #[error("cannot decode image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    InImage {
        path: PathBuf,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    /// 2 for usage and configuration problems, 3 for backend failures, 4 for
    /// data and schema problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::MissingInput(_)
            | CliError::Config { .. }
            | CliError::UnknownBackend { .. } => EXIT_USAGE,
            CliError::Image { .. } | CliError::Output { .. } => EXIT_DATA,
            CliError::InImage { source, .. } => source.exit_code(),
            CliError::Core(e) => match e {
                CoreError::Backend(_) | CoreError::Stage { .. } | CoreError::DegenerateEmbedding(_) => {
                    EXIT_BACKEND
                }
                CoreError::InvalidArgument(_)
                | CoreError::InvalidVocabulary(_)
                | CoreError::InvalidTemplate { .. } => EXIT_USAGE,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn output_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Output { path, source }
}
