//! Message transport between parties: framed envelopes, authenticated
//! channels, an append-only audit log, a deterministic in-process simulator
//! and a TCP transport.

pub mod audit;
pub mod channel;
pub mod domain;
pub mod envelope;
pub mod mailbox;
pub mod simnet;
pub mod socket;

use std::time::Duration;

use thiserror::Error;

pub use audit::{audit_assert_no_leak, AuditLog, AuditRecord, ForbiddenPattern, LeakReport};
pub use channel::{Identity, PeerDirectory, Session};
pub use domain::SecurityDomain;
pub use envelope::{EnvelopeHeader, MessageEnvelope, MsgType, PartyId, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};
pub use mailbox::Mailbox;
pub use simnet::{simnet_run, PartyProgram, SimConfig, SimEndpoint, SimOutcome};
pub use socket::{TcpConfig, TcpTransport};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("frame of {size} bytes exceeds the {max} byte limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("malformed message: {0}")]
    Decode(String),
    #[error("protocol version mismatch: ours {ours}, peer {theirs}")]
    Negotiation { ours: u8, theirs: u8 },
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("unknown party {0}")]
    UnknownParty(PartyId),
    #[error("deadlock: parties {blocked:?} blocked with no message in flight")]
    Deadlock { blocked: Vec<PartyId> },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("peer {from} reported an error: {message}")]
    Remote { from: PartyId, message: String },
    #[error("party {party} panicked: {message}")]
    PartyPanicked { party: PartyId, message: String },
    #[error("round {round}: timed out waiting for {missing:?}")]
    BarrierTimeout { round: u64, missing: Vec<PartyId> },
    #[error("round {round}: duplicate {msg_type} from {party}")]
    DuplicateSender { round: u64, party: PartyId, msg_type: String },
    #[error("connection closed by {0}")]
    Closed(PartyId),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Point-to-point message passing as seen by one party.
pub trait Transport {
    fn local_id(&self) -> &PartyId;

    /// Identifiers of every party reachable from here (excluding self).
    fn peers(&self) -> Vec<PartyId>;

    fn send(&mut self, env: MessageEnvelope) -> Result<(), TransportError>;

    /// Next delivered envelope. `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<MessageEnvelope, TransportError>;
}
