//! Selection, connection, and message properties.
//!
//! Applications describe the transport *service* they want through
//! [`TransportProperties`]; the transport system matches those preferences
//! against the [`FeatureSet`] of every registered protocol with
//! [`satisfies`] to decide which protocols may be raced.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::adapters::FeatureSet;
use crate::error::{Error, Result};

/// How strongly an application cares about a selection property.
///
/// `Require` and `Prohibit` are hard constraints. `Prefer` and `Avoid` only
/// influence the candidate score; `Ignore` has no effect at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreferenceLevel {
    Require,
    Prefer,
    Ignore,
    Avoid,
    Prohibit,
}

impl PreferenceLevel {
    pub const ALL: [PreferenceLevel; 5] = [
        PreferenceLevel::Require,
        PreferenceLevel::Prefer,
        PreferenceLevel::Ignore,
        PreferenceLevel::Avoid,
        PreferenceLevel::Prohibit,
    ];

    pub fn is_hard(self) -> bool {
        matches!(self, PreferenceLevel::Require | PreferenceLevel::Prohibit)
    }
}

/// A transport service an application can ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SelectionProperty {
    Reliability,
    PreserveMsgBoundaries,
    PreserveOrder,
    PerMsgReliability,
    Multistreaming,
    ZeroRtt,
}

impl SelectionProperty {
    pub const ALL: [SelectionProperty; 6] = [
        SelectionProperty::Reliability,
        SelectionProperty::PreserveMsgBoundaries,
        SelectionProperty::PreserveOrder,
        SelectionProperty::PerMsgReliability,
        SelectionProperty::Multistreaming,
        SelectionProperty::ZeroRtt,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SelectionProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SelectionProperty::Reliability => "reliability",
            SelectionProperty::PreserveMsgBoundaries => "preserveMsgBoundaries",
            SelectionProperty::PreserveOrder => "preserveOrder",
            SelectionProperty::PerMsgReliability => "perMsgReliability",
            SelectionProperty::Multistreaming => "multistreaming",
            SelectionProperty::ZeroRtt => "zeroRttMsg",
        };
        f.write_str(name)
    }
}

/// Preference for every [`SelectionProperty`], plus an optional interface
/// preference.
///
/// The map is total: every property always has a level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportProperties {
    prefs: [PreferenceLevel; 6],
    interface_pref: Option<(String, PreferenceLevel)>,
}

impl Default for TransportProperties {
    fn default() -> Self {
        use PreferenceLevel::*;
        // Indexed by `SelectionProperty as usize`.
        TransportProperties {
            prefs: [Require, Prefer, Require, Ignore, Prefer, Ignore],
            interface_pref: None,
        }
    }
}

impl TransportProperties {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, prop: SelectionProperty) -> PreferenceLevel {
        self.prefs[prop.index()]
    }

    /// Returns a copy with `prop` set to `level`.
    pub fn with(mut self, prop: SelectionProperty, level: PreferenceLevel) -> Self {
        self.set(prop, level);
        self
    }

    pub fn set(&mut self, prop: SelectionProperty, level: PreferenceLevel) -> &mut Self {
        self.prefs[prop.index()] = level;
        self
    }

    pub fn require(&mut self, prop: SelectionProperty) -> &mut Self {
        self.set(prop, PreferenceLevel::Require)
    }

    pub fn prefer(&mut self, prop: SelectionProperty) -> &mut Self {
        self.set(prop, PreferenceLevel::Prefer)
    }

    pub fn ignore(&mut self, prop: SelectionProperty) -> &mut Self {
        self.set(prop, PreferenceLevel::Ignore)
    }

    pub fn avoid(&mut self, prop: SelectionProperty) -> &mut Self {
        self.set(prop, PreferenceLevel::Avoid)
    }

    pub fn prohibit(&mut self, prop: SelectionProperty) -> &mut Self {
        self.set(prop, PreferenceLevel::Prohibit)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SelectionProperty, PreferenceLevel)> + '_ {
        SelectionProperty::ALL.iter().map(|&p| (p, self.get(p)))
    }

    pub fn interface_pref(&self) -> Option<(&str, PreferenceLevel)> {
        self.interface_pref.as_ref().map(|(n, l)| (n.as_str(), *l))
    }

    pub fn set_interface(&mut self, name: impl Into<String>, level: PreferenceLevel) -> &mut Self {
        self.interface_pref = Some((name.into(), level));
        self
    }
}

/// Outcome of matching a protocol's features against transport properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchResult {
    /// A hard constraint failed on this property.
    Excluded(SelectionProperty),
    /// The protocol may be used; higher scores are preferred.
    Eligible(i32),
}

impl MatchResult {
    pub fn is_eligible(self) -> bool {
        matches!(self, MatchResult::Eligible(_))
    }
}

/// Matches `features` against `tp`.
///
/// Hard constraints are checked in [`SelectionProperty::ALL`] order and the
/// first violation is reported. Otherwise the score is the number of
/// `Prefer` properties the protocol has minus the number of `Avoid`
/// properties it has.
pub fn satisfies(features: &FeatureSet, tp: &TransportProperties) -> MatchResult {
    let mut score = 0;
    for (prop, level) in tp.iter() {
        let present = features.has(prop);
        match level {
            PreferenceLevel::Require if !present => return MatchResult::Excluded(prop),
            PreferenceLevel::Prohibit if present => return MatchResult::Excluded(prop),
            PreferenceLevel::Prefer if present => score += 1,
            PreferenceLevel::Avoid if present => score -= 1,
            _ => {}
        }
    }
    MatchResult::Eligible(score)
}

/// Capacity profile of a connection. Determines the DSCP of outgoing packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CapacityProfile {
    #[default]
    Default,
    Scavenger,
    LowLatencyInteractive,
    ConstantRateStreaming,
}

impl CapacityProfile {
    pub const ALL: [CapacityProfile; 4] = [
        CapacityProfile::Default,
        CapacityProfile::Scavenger,
        CapacityProfile::LowLatencyInteractive,
        CapacityProfile::ConstantRateStreaming,
    ];

    pub fn dscp(self) -> u8 {
        dscp_for_profile(self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CapacityProfile::Default => "default",
            CapacityProfile::Scavenger => "scavenger",
            CapacityProfile::LowLatencyInteractive => "lowLatencyInteractive",
            CapacityProfile::ConstantRateStreaming => "constantRateStreaming",
        }
    }
}

impl FromStr for CapacityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CapacityProfile::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown capacity profile `{s}`")))
    }
}

/// DiffServ code point (6 bits) for a capacity profile: best effort,
/// lower effort, expedited forwarding and AF41 respectively.
pub fn dscp_for_profile(profile: CapacityProfile) -> u8 {
    match profile {
        CapacityProfile::Default => 0,
        CapacityProfile::Scavenger => 1,
        CapacityProfile::LowLatencyInteractive => 46,
        CapacityProfile::ConstantRateStreaming => 34,
    }
}

/// Key under which the capacity profile is exposed by
/// [`ConnectionProperties::get`] and [`ConnectionProperties::set`].
pub const CAPACITY_PROFILE: &str = "capacityProfile";

/// Properties of an established connection. Shared by every member of a
/// connection group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectionProperties {
    capacity_profile: CapacityProfile,
    extra: BTreeMap<String, String>,
}

impl ConnectionProperties {
    pub fn capacity_profile(&self) -> CapacityProfile {
        self.capacity_profile
    }

    pub fn set_capacity_profile(&mut self, profile: CapacityProfile) {
        self.capacity_profile = profile;
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key == CAPACITY_PROFILE {
            return Some(self.capacity_profile.as_str().to_owned());
        }
        self.extra.get(key).cloned()
    }

    /// Sets a property by key. The capacity profile value must name a known
    /// profile; any other key is stored verbatim.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == CAPACITY_PROFILE {
            self.capacity_profile = value.parse()?;
        } else {
            self.extra.insert(key.to_owned(), value.to_owned());
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        std::iter::once(CAPACITY_PROFILE).chain(self.extra.keys().map(String::as_str))
    }
}

/// Per-message properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageProperties {
    /// `None` means the message never expires.
    pub lifetime: Option<Duration>,
    pub ordered: bool,
    pub reliable: bool,
}

impl Default for MessageProperties {
    fn default() -> Self {
        MessageProperties {
            lifetime: None,
            ordered: true,
            reliable: true,
        }
    }
}

impl MessageProperties {
    pub fn with_lifetime(mut self, lifetime: Duration) -> Self {
        self.lifetime = Some(lifetime);
        self
    }

    pub fn unordered(mut self) -> Self {
        self.ordered = false;
        self
    }

    pub fn unreliable(mut self) -> Self {
        self.reliable = false;
        self
    }
}

/// Opaque security configuration. Carried along but never interpreted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SecurityParameters {
    pub opaque: Vec<u8>,
}
