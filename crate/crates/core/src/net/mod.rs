//! The carrier layer beneath the protocol adapters.
//!
//! A [`Network`] offers byte-stream carriers, message carriers (simulated
//! only), and datagram sockets, and reports everything that happens to
//! them as [`NetEvent`]s. The transport system is written against this
//! trait; [`RealNetwork`] backs it with the host's sockets and
//! [`crate::netsim`] with a deterministic simulator.

mod real;

use std::fmt;
use std::net::SocketAddr;
use std::time::Duration;

use crate::error::Result;

pub use real::RealNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CarrierId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AcceptorId(pub u64);

impl fmt::Display for CarrierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CarrierKind {
    /// Reliable ordered byte stream (TCP, SIM_STREAM).
    Stream,
    /// Multi-stream message association (SIM_MSG). Each carrier is one
    /// stream; siblings share the association and its congestion state.
    Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    Graceful,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendStatus {
    Accepted,
    /// Nothing was taken; a [`NetEvent::Writable`] follows when there is room.
    WouldBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageOptions {
    pub ordered: bool,
    pub reliable: bool,
}

impl Default for MessageOptions {
    fn default() -> Self {
        MessageOptions {
            ordered: true,
            reliable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    Connected(CarrierId),
    ConnectFailed(CarrierId, String),
    /// A peer opened a carrier towards us. `sibling_of` is set when it is a
    /// new stream of an association we already have a carrier on; such
    /// streams can arrive without any acceptor.
    Accepted {
        acceptor: Option<AcceptorId>,
        carrier: CarrierId,
        peer: SocketAddr,
        sibling_of: Option<CarrierId>,
    },
    /// Stream bytes, or one complete message on a message carrier.
    Data(CarrierId, Vec<u8>),
    Datagram {
        carrier: CarrierId,
        from: SocketAddr,
        data: Vec<u8>,
    },
    Writable(CarrierId),
    PeerClosed(CarrierId),
    PeerReset(CarrierId),
}

pub trait Network: Send {
    /// Time since this network's epoch.
    fn now(&self) -> Duration;

    fn resolve(&mut self, host: &str, port: u16) -> Result<Vec<SocketAddr>>;

    /// Starts connecting; completion is reported as `Connected` or
    /// `ConnectFailed`.
    fn connect(&mut self, kind: CarrierKind, remote: SocketAddr) -> Result<CarrierId>;

    /// Opens another stream on the association `carrier` belongs to. The
    /// new carrier is usable at once.
    fn open_sibling(&mut self, carrier: CarrierId) -> Result<CarrierId>;

    fn listen(&mut self, kind: CarrierKind, local: SocketAddr) -> Result<AcceptorId>;

    fn close_acceptor(&mut self, acceptor: AcceptorId);

    fn bind_datagram(&mut self, local: SocketAddr) -> Result<CarrierId>;

    /// Appends bytes to a stream, or queues one message on a message carrier.
    fn send(&mut self, carrier: CarrierId, data: &[u8], opts: MessageOptions) -> Result<SendStatus>;

    fn send_to(&mut self, carrier: CarrierId, to: SocketAddr, data: &[u8]) -> Result<()>;

    fn close(&mut self, carrier: CarrierId, mode: CloseMode);

    /// Marks subsequent packets of `carrier` with a DSCP. Best effort.
    fn set_dscp(&mut self, carrier: CarrierId, dscp: u8);

    fn local_addr(&self, carrier: CarrierId) -> Option<SocketAddr>;

    fn acceptor_addr(&self, acceptor: AcceptorId) -> Option<SocketAddr>;

    /// Waits up to `timeout` for events. Only meaningful for networks that
    /// drive themselves; simulated hosts are driven by their world.
    fn poll(&mut self, timeout: Option<Duration>) -> Result<Vec<NetEvent>>;
}
