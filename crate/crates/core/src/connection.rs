//! Connection, listener and group handles.

use std::fmt;
use std::net::SocketAddr;

use crate::adapters::ProtocolId;
use crate::error::{Error, Result};
use crate::framer::MessageContext;
use crate::properties::MessageProperties;
use crate::system::TransportSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ListenerId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u64);

/// Identifies one sent message in later `Sent`, `SendError` and `Expired`
/// events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageRef(pub u64);

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for MessageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnectionState {
    Establishing,
    Established,
    Closing,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Ready,
    EstablishmentError(String),
    ConnectionReceived(ConnId),
    Received { len: usize },
    Sent(MessageRef),
    SendError(MessageRef, String),
    Expired(MessageRef),
    CloneError(String),
    Closed,
    ConnectionError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Ready,
    EstablishmentError,
    ConnectionReceived,
    Received,
    Sent,
    SendError,
    Expired,
    CloneError,
    Closed,
    ConnectionError,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Ready => EventKind::Ready,
            Event::EstablishmentError(_) => EventKind::EstablishmentError,
            Event::ConnectionReceived(_) => EventKind::ConnectionReceived,
            Event::Received { .. } => EventKind::Received,
            Event::Sent(_) => EventKind::Sent,
            Event::SendError(..) => EventKind::SendError,
            Event::Expired(_) => EventKind::Expired,
            Event::CloneError(_) => EventKind::CloneError,
            Event::Closed => EventKind::Closed,
            Event::ConnectionError(_) => EventKind::ConnectionError,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Ready => write!(f, "event=Ready"),
            Event::EstablishmentError(c) => write!(f, "event=EstablishmentError cause={c:?}"),
            Event::ConnectionReceived(c) => write!(f, "event=ConnectionReceived new={c}"),
            Event::Received { len } => write!(f, "event=Received len={len}"),
            Event::Sent(m) => write!(f, "event=Sent msg={m}"),
            Event::SendError(m, c) => write!(f, "event=SendError msg={m} cause={c:?}"),
            Event::Expired(m) => write!(f, "event=Expired msg={m}"),
            Event::CloneError(c) => write!(f, "event=CloneError cause={c:?}"),
            Event::Closed => write!(f, "event=Closed"),
            Event::ConnectionError(c) => write!(f, "event=ConnectionError cause={c:?}"),
        }
    }
}

/// An inbound message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub data: Vec<u8>,
    pub context: MessageContext,
    pub is_end: bool,
}

pub(crate) type ConnHandler = Box<dyn FnMut(&Connection, &Event) + Send>;
pub(crate) type ReceiveHandler = Box<dyn FnOnce(&Connection, Message) + Send>;
pub(crate) type ListenerHandler = Box<dyn FnMut(&Listener, Connection) + Send>;
pub(crate) type CloneErrorHandler = Box<dyn FnOnce(&Connection, &str) + Send>;

/// Handle to one connection. Cheap to clone.
#[derive(Clone)]
pub struct Connection {
    system: TransportSystem,
    id: ConnId,
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection").field("id", &self.id).finish()
    }
}

impl PartialEq for Connection {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Connection {
    pub(crate) fn new(system: TransportSystem, id: ConnId) -> Self {
        Connection { system, id }
    }

    pub fn id(&self) -> ConnId {
        self.id
    }

    pub fn system(&self) -> &TransportSystem {
        &self.system
    }

    pub fn state(&self) -> ConnectionState {
        self.system
            .lock()
            .conns
            .get(&self.id)
            .map_or(ConnectionState::Closed, |c| c.state)
    }

    /// The protocol that won establishment.
    pub fn protocol(&self) -> Option<ProtocolId> {
        self.system.lock().conns.get(&self.id).and_then(|c| c.protocol)
    }

    pub fn remote(&self) -> Option<SocketAddr> {
        self.system.lock().conns.get(&self.id).and_then(|c| c.remote)
    }

    pub fn group(&self) -> GroupId {
        self.system.lock().conns[&self.id].group
    }

    /// Every connection in this connection's group, itself included.
    pub fn group_members(&self) -> Vec<Connection> {
        let st = self.system.lock();
        let group = st.conns[&self.id].group;
        st.groups[&group]
            .members
            .iter()
            .map(|&id| Connection::new(self.system.clone(), id))
            .collect()
    }

    /// Installs the handler for one kind of event, replacing any previous one.
    pub fn on(&self, kind: EventKind, handler: impl FnMut(&Connection, &Event) + Send + 'static) {
        if let Some(c) = self.system.lock().conns.get_mut(&self.id) {
            c.handlers.insert(kind, Box::new(handler));
        }
    }

    pub fn on_ready(&self, mut handler: impl FnMut(&Connection) + Send + 'static) {
        self.on(EventKind::Ready, move |c, _| handler(c));
    }

    pub fn on_establishment_error(&self, mut handler: impl FnMut(&Connection, &str) + Send + 'static) {
        self.on(EventKind::EstablishmentError, move |c, e| {
            if let Event::EstablishmentError(cause) = e {
                handler(c, cause)
            }
        });
    }

    pub fn on_sent(&self, mut handler: impl FnMut(&Connection, MessageRef) + Send + 'static) {
        self.on(EventKind::Sent, move |c, e| {
            if let Event::Sent(m) = e {
                handler(c, *m)
            }
        });
    }

    pub fn on_send_error(&self, mut handler: impl FnMut(&Connection, MessageRef, &str) + Send + 'static) {
        self.on(EventKind::SendError, move |c, e| {
            if let Event::SendError(m, cause) = e {
                handler(c, *m, cause)
            }
        });
    }

    pub fn on_expired(&self, mut handler: impl FnMut(&Connection, MessageRef) + Send + 'static) {
        self.on(EventKind::Expired, move |c, e| {
            if let Event::Expired(m) = e {
                handler(c, *m)
            }
        });
    }

    pub fn on_closed(&self, mut handler: impl FnMut(&Connection) + Send + 'static) {
        self.on(EventKind::Closed, move |c, _| handler(c));
    }

    pub fn on_connection_error(&self, mut handler: impl FnMut(&Connection, &str) + Send + 'static) {
        self.on(EventKind::ConnectionError, move |c, e| {
            if let Event::ConnectionError(cause) = e {
                handler(c, cause)
            }
        });
    }

    /// Sends one complete message with default properties.
    pub fn send(&self, data: impl AsRef<[u8]>) -> Result<MessageRef> {
        self.send_with(data, MessageProperties::default(), true)
    }

    /// Sends a message or, with `is_end` false, one part of it. Parts
    /// accumulate until a call with `is_end` set.
    pub fn send_with(&self, data: impl AsRef<[u8]>, props: MessageProperties, is_end: bool) -> Result<MessageRef> {
        self.system.lock().send(self.id, data.as_ref(), props, is_end)
    }

    /// Asks for the next inbound message. Each call yields exactly one
    /// message, in arrival order.
    pub fn receive(&self, handler: impl FnOnce(&Connection, Message) + Send + 'static) -> Result<()> {
        self.system.lock().receive(self.id, Box::new(handler))
    }

    /// Number of receive calls not yet matched by a message.
    pub fn pending_receives(&self) -> usize {
        self.system
            .lock()
            .conns
            .get(&self.id)
            .map_or(0, |c| c.pending_receives())
    }

    /// Number of complete messages waiting for a receive call.
    pub fn buffered_messages(&self) -> usize {
        self.system
            .lock()
            .conns
            .get(&self.id)
            .map_or(0, |c| c.buffered_messages())
    }

    /// Creates a new connection in the same group. Readiness is reported
    /// to the new connection's `Ready` handler; failure goes to `on_error`.
    pub fn clone_connection(&self, on_error: impl FnOnce(&Connection, &str) + Send + 'static) -> Result<Connection> {
        let id = self.system.lock().clone_conn(self.id, Box::new(on_error))?;
        Ok(Connection::new(self.system.clone(), id))
    }

    /// Reads a connection property. Properties are shared by the group.
    pub fn get_property(&self, key: &str) -> Option<String> {
        let st = self.system.lock();
        let group = st.conns.get(&self.id)?.group;
        st.groups[&group].props.get(key)
    }

    /// Writes a connection property for the whole group.
    pub fn set_property(&self, key: &str, value: &str) -> Result<()> {
        self.system.lock().set_property(self.id, key, value)
    }

    /// Sends what is queued, then closes.
    pub fn close(&self) {
        self.system.lock().close(self.id);
    }

    /// Drops queued messages and closes at once.
    pub fn abort(&self) {
        self.system.lock().abort(self.id);
    }
}

/// Handle to a listener.
#[derive(Clone)]
pub struct Listener {
    system: TransportSystem,
    id: ListenerId,
}

impl fmt::Debug for Listener {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Listener").field("id", &self.id).finish()
    }
}

impl Listener {
    pub(crate) fn new(system: TransportSystem, id: ListenerId) -> Self {
        Listener { system, id }
    }

    pub fn id(&self) -> ListenerId {
        self.id
    }

    pub fn system(&self) -> &TransportSystem {
        &self.system
    }

    pub fn on_connection_received(&self, handler: impl FnMut(&Listener, Connection) + Send + 'static) {
        if let Some(l) = self.system.lock().listeners.get_mut(&self.id) {
            l.handler = Some(Box::new(handler));
        }
    }

    /// Bound addresses, per protocol.
    pub fn local_addrs(&self) -> Vec<(ProtocolId, std::net::SocketAddr)> {
        self.system
            .lock()
            .listeners
            .get(&self.id)
            .map(|l| l.local.clone())
            .unwrap_or_default()
    }

    /// The port every protocol of this listener is bound to.
    pub fn port(&self) -> Result<u16> {
        self.local_addrs().first().map(|(_, a)| a.port()).ok_or(Error::Closed)
    }

    pub fn protocols(&self) -> Vec<ProtocolId> {
        self.system
            .lock()
            .listeners
            .get(&self.id)
            .map(|l| l.protocols.clone())
            .unwrap_or_default()
    }

    pub fn stop(&self) {
        self.system.lock().stop_listener(self.id);
    }
}
