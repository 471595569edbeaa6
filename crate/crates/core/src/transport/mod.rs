//! Length-prefixed binary protocol over TCP: one server, `N` clients, one
//! synchronous round at a time.
//!
//! ```text
//! client                         server
//!   HELLO(version, hash, |D|) ->
//!                             <- HELLO            (or BYE on mismatch)
//!                             <- GLOBAL_MODEL(r)  participants only
//!   CLIENT_UPDATE(r)          ->                  or MASKED_SHARE(r)
//!                             <- ROUND_REPORT(r)  everyone
//!   ...
//!                             <- BYE              or ABORT, then close
//! ```
//!
//! There is no TLS; confidentiality of updates rests on the privacy mechanism
//! and the masked sum.

mod client;
mod frame;
mod message;
mod server;

use std::time::Duration;

use thiserror::Error;

use crate::federation::FederationError;

pub use client::{join, ClientSession, JoinOutcome};
pub use frame::{read_frame, write_frame, Frame, FrameDecoder, FrameError, MessageType, HEADER_LEN, MAGIC, MAX_PAYLOAD};
pub use message::{
    decode_params, encode_params, GlobalModel, Hello, Message, Reader, WireError, Writer, MAX_DIM, PROTOCOL_VERSION,
};
pub use server::{serve, ServeOutcome, ServerOptions};

pub const DEFAULT_PORT: u16 = 7700;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub(crate) const BYE_HASH_MISMATCH: &str = "config hash mismatch";
pub(crate) const BYE_VERSION_MISMATCH: &str = "protocol version mismatch";
pub(crate) const BYE_DUPLICATE: &str = "duplicate client id";
pub(crate) const BYE_UNKNOWN: &str = "unknown client id";
pub(crate) const BYE_DONE: &str = "run complete";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("config hash mismatch: {0}")]
    ConfigMismatch(String),
    #[error("rejected by server: {0}")]
    Rejected(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}
