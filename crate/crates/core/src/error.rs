use std::io;

use crate::adapters::ProtocolId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no local or remote endpoint given")]
    MissingEndpoint,
    #[error("preconnection already started")]
    AlreadyStarted,
    #[error("no candidate protocol satisfies the transport properties and system policy")]
    NoCandidates,
    #[error("invalid message: {0}")]
    InvalidMessage(&'static str),
    #[error("connection is not established")]
    NotEstablished,
    #[error("connection is closed")]
    Closed,
    #[error("failed to bind {protocol}: {cause}")]
    BindFailure { protocol: ProtocolId, cause: String },
    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),
    #[error("message of {size} bytes exceeds the {max}-byte limit")]
    MessageTooLarge { size: usize, max: usize },
    #[error("carrier closed")]
    CarrierClosed,
    #[error("MSGMUX handshake mismatch")]
    HandshakeMismatch,
    #[error("timed out")]
    Timeout,
    #[error("MSGMUX association closed")]
    AssociationClosed,
    #[error("MSGMUX stream limit reached")]
    StreamLimit,
    #[error("malformed MSGMUX frame type 0x{0:02x}")]
    MalformedFrame(u8),
    #[error("MSGMUX frame payload of {0} bytes exceeds the decoder limit")]
    FrameTooLarge(u32),
    #[error("message reassembly exceeds the {0}-byte limit")]
    ReassemblyOverflow(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("operation not supported: {0}")]
    Unsupported(&'static str),
    #[error("address resolution failed for `{0}`")]
    Resolve(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
