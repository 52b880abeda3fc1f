use thiserror::Error;

use crate::channel::WireError;
use crate::nnkit::NnError;
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("training diverged in {stage} (epoch {epoch}): {detail}")]
    Divergence { stage: String, epoch: usize, detail: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
