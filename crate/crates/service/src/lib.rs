//! HTTP service and command-line entry points for tabletalk episodes.

pub mod api;
pub mod cli;
pub mod config;
pub mod episodes;

use tabletalk_core::dialog::EpisodeStatus;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("no episode with id {0}")]
    NotFound(String),
    #[error("invalid roster: {0}")]
    InvalidRoster(String),
    #[error("not your turn (status: {status:?})")]
    OutOfTurn { status: EpisodeStatus },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("io: {0}")]
    Io(String),
}
