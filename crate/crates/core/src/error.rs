use std::io;

use thiserror::Error;

/// Errors surfaced by the library API.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("frame of {0} bytes exceeds the 16 MiB cap")]
    FrameTooLarge(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("storage consistency violation: {0}")]
    Consistency(String),
    #[error("corrupted snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("join failed: {0}")]
    JoinFailed(String),
    #[error("identifier collision with {0}")]
    IdCollision(String),
    #[error("simulated horizon of {0} ticks exceeded")]
    HorizonExceeded(u64),
    #[error("no backup group: overlay has a single group")]
    NoBackup,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
