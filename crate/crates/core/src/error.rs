use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unknown variable: {0}")]
    UnknownVariable(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("box {index} rasterizes to zero cells on a {grid_w}x{grid_h} grid")]
    DegenerateBox {
        index: usize,
        grid_w: usize,
        grid_h: usize,
    },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("attention stack has no layers")]
    EmptyStack,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} outside the schedule range 0..={max}")]
    Timestep { t: usize, max: usize },

    #[error("latent is already at the terminal state t = 0")]
    TerminalState,

    #[error("could not place scene objects: {0}")]
    Placement(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("diagnostic undefined: {0}")]
    DiagnosticUndefined(String),

    #[error("vocabulary has no token `{0}`")]
    UnknownToken(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}
