use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::rectify::RectifyError;

#[derive(Debug, Error)]
pub enum EvrbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("decode step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<EvrbError>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl EvrbError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        EvrbError::Step {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| EvrbError::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |source| EvrbError::Csv { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| EvrbError::Json { path, source }
    }

    /// True for errors caused by bad user input rather than IO.
    pub fn is_config(&self) -> bool {
        match self {
            EvrbError::Io { .. } | EvrbError::Csv { .. } => false,
            EvrbError::Json { source, .. } => !source.is_io(),
            EvrbError::Step { source, .. } => source.is_config(),
            _ => true,
        }
    }
}
