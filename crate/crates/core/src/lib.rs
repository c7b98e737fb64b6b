//! Protocol-independent transport services.
//!
//! Applications describe what they need from a transport with
//! [`TransportProperties`], and the [`TransportSystem`] races every
//! protocol that fits, falling back to plain TCP when richer protocols are
//! unavailable. Connections created with [`Connection::clone_connection`]
//! form groups that share properties and, where the protocol allows, a
//! single association and congestion window.
//!
//! ```no_run
//! use taps_core::*;
//!
//! let system = TransportSystem::new()?;
//! let remote = RemoteEndpoint::new().with_address("127.0.0.1").with_port(5000);
//! let mut pre = Preconnection::new(None, Some(remote), TransportProperties::new(), None)?;
//! let conn = pre.initiate(&system)?;
//! conn.on_ready(|c| {
//!     c.send(b"hello").unwrap();
//! });
//! system.run()?;
//! # Ok::<(), taps_core::Error>(())
//! ```

pub mod adapters;
pub mod connection;
pub mod error;
pub mod framer;
pub mod net;
pub mod netsim;
pub mod preconnection;
pub mod properties;
pub mod racing;
pub mod system;

pub use adapters::msgmux;
pub use adapters::{FeatureMatrix, FeatureSet, ProtocolId};
pub use connection::{
    ConnId, Connection, ConnectionState, Event, EventKind, GroupId, Listener, ListenerId, Message, MessageRef,
};
pub use error::{Error, Result};
pub use framer::{
    Delivery, Framer, FramerChain, FramerError, FramerSender, HeaderFramer, MessageContext, ReceiveCursor,
};
pub use preconnection::{LocalEndpoint, Preconnection, RemoteEndpoint};
pub use properties::{
    CapacityProfile, ConnectionProperties, MessageProperties, PreferenceLevel, SecurityParameters, SelectionProperty,
    TransportProperties,
};
pub use racing::{CacheOutcome, CandidateStack, Race, RaceAction, RaceCache, RaceConfig, SystemPolicy};
pub use system::{RaceOutcome, RaceRecord, TraceRecord, TransportSystem};
