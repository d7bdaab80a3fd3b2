use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input file problem tied to a 1-based data row (header excluded).
    #[error("{source_name}: row {row}: {message}")]
    Parse {
        source_name: String,
        row: usize,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("date misalignment: {0}")]
    Alignment(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("portfolio ruin on day {day}: daily return {value} <= -1")]
    Ruin { day: usize, value: f64 },

    /// A stage attempted to read data it holds no access rights for.
    #[error("access violation: {0}")]
    Leakage(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Parse { .. }
            | Error::InsufficientData(_)
            | Error::Alignment(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Shape(_)
            | Error::Leakage(_) => 3,
            Error::Domain(_) | Error::Numerical(_) | Error::Ruin { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
