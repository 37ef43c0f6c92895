use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("rendezvous with rank {rank} failed: {reason}")]
    Rendezvous { rank: usize, reason: String },

    #[error("transport error talking to rank {peer}: {source}")]
    Transport {
        peer: usize,
        #[source]
        source: io::Error,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("context is closed")]
    Closed,

    #[error("timeline error: {0}")]
    Timeline(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn transport(peer: usize, source: io::Error) -> Self {
        Error::Transport { peer, source }
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Copy suitable for fanning one failure out to many waiters.
    /// `io::Error` is not `Clone`, so transport errors keep kind and message only.
    pub(crate) fn duplicate(&self) -> Self {
        match self {
            Error::Config(s) => Error::Config(s.clone()),
            Error::Rendezvous { rank, reason } => Error::Rendezvous {
                rank: *rank,
                reason: reason.clone(),
            },
            Error::Transport { peer, source } => Error::Transport {
                peer: *peer,
                source: io::Error::new(source.kind(), source.to_string()),
            },
            Error::Protocol(s) => Error::Protocol(s.clone()),
            Error::Usage(s) => Error::Usage(s.clone()),
            Error::ContractViolation(s) => Error::ContractViolation(s.clone()),
            Error::Unsupported(s) => Error::Unsupported(s.clone()),
            Error::Closed => Error::Closed,
            Error::Timeline(s) => Error::Timeline(s.clone()),
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), e.to_string())),
        }
    }
}
