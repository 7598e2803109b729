use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::wire::MsgType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("empty query text")]
    EmptyQuery,
    #[error("no peers available")]
    NoPeers,
    #[error("no eligible relay")]
    NoEligibleRelay,
    #[error("fake query table is empty")]
    EmptyFakeTable,
    #[error("node not bootstrapped: {0}")]
    NotBootstrapped(&'static str),
    #[error("wire decode failed: {0}")]
    Decode(String),
    #[error("unexpected message type {0:?}")]
    UnexpectedMessage(MsgType),
    #[error("replayed nonce from {0}")]
    Replay(String),
    #[error("sender {0} is not attested")]
    Unattested(String),
    #[error("authentication failed for message from {0}")]
    Decrypt(String),
    #[error("attestation rejected for {peer}: unknown build digest {digest}")]
    AttestationRejected { peer: String, digest: String },
    #[error("peer {0} timed out")]
    Timeout(String),
    #[error("transport failure towards {peer}: {reason}")]
    Transport { peer: String, reason: String },
    #[error("search backend refused the request: {0}")]
    Backend(String),
    #[error("real query failed after retry: {0}")]
    RealPathFailed(Box<Error>),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_owned(),
            source,
        }
    }

    /// Failures that should start a peer's blacklist timer.
    pub fn is_unresponsive(&self) -> bool {
        matches!(self, Error::Timeout(_) | Error::Transport { .. })
    }
}
