use std::path::PathBuf;

use arpersona::model::ModelError;
use arpersona::pipeline::PipelineError;
use arpersona::sampler::SamplerError;
use arpersona::trainer::TrainError;
use arpersona::vocab::VocabError;
use arpersona::world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {0} (run the producing command first)")]
    Missing(PathBuf),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    /// 0 ok, 2 config, 3 integrity, 4 stage order, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) | CliError::Io { .. } => 2,
            CliError::Integrity(_) => 3,
            CliError::StageOrder(_) => 4,
            CliError::Pipeline(e) => e.exit_code(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.into())
            }
        }
    )*};
}

via_pipeline!(ModelError, TrainError, VocabError, WorldError, SamplerError);

pub type Result<T> = std::result::Result<T, CliError>;
