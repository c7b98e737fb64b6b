//! Protocol registry, feature matrix, and the MSGMUX wire protocol.

pub mod msgmux;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::properties::SelectionProperty;

/// Largest UDP payload that fits in a single IPv4 datagram.
pub const MAX_DATAGRAM_PAYLOAD: usize = 65_507;

/// Protocols a transport system can race.
///
/// `SimStream` and `SimMsg` only exist on simulated networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolId {
    Tcp,
    Udp,
    Msgmux,
    SimStream,
    SimMsg,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 5] = [
        ProtocolId::Tcp,
        ProtocolId::Udp,
        ProtocolId::Msgmux,
        ProtocolId::SimStream,
        ProtocolId::SimMsg,
    ];

    /// Fixed tie-break rank; lower sorts first.
    pub fn rank(self) -> u8 {
        match self {
            ProtocolId::Msgmux => 0,
            ProtocolId::SimMsg => 1,
            ProtocolId::Tcp => 2,
            ProtocolId::SimStream => 3,
            ProtocolId::Udp => 4,
        }
    }

    pub fn features(self) -> FeatureSet {
        let f = FeatureSet::default();
        match self {
            ProtocolId::Tcp | ProtocolId::SimStream => FeatureSet {
                reliable: true,
                preserves_order: true,
                ..f
            },
            ProtocolId::Udp => FeatureSet {
                preserves_msg_boundaries: true,
                zero_rtt: true,
                ..f
            },
            ProtocolId::Msgmux => FeatureSet {
                reliable: true,
                preserves_msg_boundaries: true,
                preserves_order: true,
                multistreaming: true,
                ..f
            },
            // Ordering is chosen per message.
            ProtocolId::SimMsg => FeatureSet {
                reliable: true,
                preserves_msg_boundaries: true,
                multistreaming: true,
                per_msg_reliability: true,
                ..f
            },
        }
    }

    /// Carried over a byte-stream carrier (real TCP or a simulated stream).
    pub fn uses_stream_carrier(self) -> bool {
        matches!(self, ProtocolId::Tcp | ProtocolId::Msgmux | ProtocolId::SimStream)
    }

    /// Whether the protocol can drop a message whose lifetime elapsed while
    /// it was still queued.
    pub fn honors_lifetime(self) -> bool {
        let f = self.features();
        f.per_msg_reliability || !f.reliable
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Tcp => "TCP",
            ProtocolId::Udp => "UDP",
            ProtocolId::Msgmux => "MSGMUX",
            ProtocolId::SimStream => "SIM_STREAM",
            ProtocolId::SimMsg => "SIM_MSG",
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownProtocol(s.to_owned()))
    }
}

/// Transport services a protocol provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureSet {
    pub reliable: bool,
    pub preserves_msg_boundaries: bool,
    pub preserves_order: bool,
    pub per_msg_reliability: bool,
    pub multistreaming: bool,
    pub zero_rtt: bool,
}

impl FeatureSet {
    pub fn has(&self, prop: SelectionProperty) -> bool {
        match prop {
            SelectionProperty::Reliability => self.reliable,
            SelectionProperty::PreserveMsgBoundaries => self.preserves_msg_boundaries,
            SelectionProperty::PreserveOrder => self.preserves_order,
            SelectionProperty::PerMsgReliability => self.per_msg_reliability,
            SelectionProperty::Multistreaming => self.multistreaming,
            SelectionProperty::ZeroRtt => self.zero_rtt,
        }
    }
}

/// The set of protocols registered with a transport system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    protocols: Vec<ProtocolId>,
}

impl FeatureMatrix {
    pub fn new(protocols: impl IntoIterator<Item = ProtocolId>) -> Self {
        let mut protocols: Vec<_> = protocols.into_iter().collect();
        protocols.sort_by_key(|p| p.rank());
        protocols.dedup();
        FeatureMatrix { protocols }
    }

    /// TCP, UDP and MSGMUX: what the host networking stack offers.
    pub fn host() -> Self {
        Self::new([ProtocolId::Tcp, ProtocolId::Udp, ProtocolId::Msgmux])
    }

    pub fn protocols(&self) -> &[ProtocolId] {
        &self.protocols
    }

    pub fn contains(&self, protocol: ProtocolId) -> bool {
        self.protocols.contains(&protocol)
    }

    pub fn features(&self, protocol: ProtocolId) -> Result<FeatureSet> {
        if self.contains(protocol) {
            Ok(protocol.features())
        } else {
            Err(Error::UnknownProtocol(protocol.to_string()))
        }
    }
}

impl Default for FeatureMatrix {
    fn default() -> Self {
        Self::host()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows() {
        assert!(!ProtocolId::Tcp.features().preserves_msg_boundaries);
        assert!(!ProtocolId::Udp.features().reliable);
        assert!(ProtocolId::Msgmux.features().multistreaming);
        assert_eq!(ProtocolId::SimStream.features(), ProtocolId::Tcp.features());
        let sim_msg = ProtocolId::SimMsg.features();
        assert!(sim_msg.per_msg_reliability && !sim_msg.preserves_order);
    }

    #[test]
    fn unknown_protocol() {
        let m = FeatureMatrix::host();
        assert!(m.features(ProtocolId::Tcp).is_ok());
        assert!(matches!(m.features(ProtocolId::SimMsg), Err(Error::UnknownProtocol(_))));
        assert!(matches!("SCTP".parse::<ProtocolId>(), Err(Error::UnknownProtocol(_))));
        assert_eq!("msgmux".parse::<ProtocolId>().unwrap(), ProtocolId::Msgmux);
    }

    #[test]
    fn lifetime_support() {
        assert!(ProtocolId::SimMsg.honors_lifetime());
        assert!(ProtocolId::Udp.honors_lifetime());
        assert!(!ProtocolId::Tcp.honors_lifetime());
        assert!(!ProtocolId::Msgmux.honors_lifetime());
    }
}
