//! Deterministic discrete-event network simulator.
//!
//! A [`SimWorld`] owns one [`SimNet`] and a transport system per simulated
//! host. Time only moves when the world steps, so a run is a pure function
//! of its seed and configuration.

pub mod cc;
pub mod experiments;
pub mod link;
mod net;

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use crate::adapters::{FeatureMatrix, ProtocolId};
use crate::racing::SystemPolicy;
use crate::system::TransportSystem;

pub use cc::{CcState, CongestionController, INITIAL_WINDOW, MSS};
pub use link::{bdp_packets, DropReason, LinkConfig, SimLink, Transmit};
pub use net::{DropRule, PacketKind, PacketRecord, SimHost, SimNet, HEADER_BYTES, UDP_HEADER_BYTES};

/// A simulated network plus the transport systems running on its hosts.
pub struct SimWorld {
    net: Arc<Mutex<SimNet>>,
    systems: BTreeMap<IpAddr, TransportSystem>,
}

impl std::fmt::Debug for SimWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimWorld").field("hosts", &self.systems.keys()).finish()
    }
}

impl SimWorld {
    pub fn new(seed: u64, default_link: LinkConfig) -> Self {
        SimWorld {
            net: Arc::new(Mutex::new(SimNet::new(seed, default_link))),
            systems: BTreeMap::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, SimNet> {
        self.net.lock().expect("simulator lock poisoned")
    }

    /// Adds a host supporting `protocols` and returns its transport system.
    pub fn add_host(&mut self, ip: IpAddr, protocols: &[ProtocolId]) -> TransportSystem {
        self.lock().add_host(ip);
        let host = SimHost::new(self.net.clone(), ip);
        let system = TransportSystem::with_network(
            Box::new(host),
            FeatureMatrix::new(protocols.iter().copied()),
            SystemPolicy::default(),
        );
        self.systems.insert(ip, system.clone());
        system
    }

    pub fn system(&self, ip: IpAddr) -> Option<&TransportSystem> {
        self.systems.get(&ip)
    }

    pub fn set_link(&self, src: IpAddr, dst: IpAddr, cfg: LinkConfig) {
        self.lock().set_link(src, dst, cfg);
    }

    pub fn add_drop_rule(&self, rule: DropRule) {
        self.lock().add_drop_rule(rule);
    }

    pub fn now(&self) -> Duration {
        self.lock().now()
    }

    pub fn packet_log(&self) -> Vec<PacketRecord> {
        self.lock().packet_log().to_vec()
    }

    /// Runs `f` with the simulator locked.
    pub fn with_net<R>(&self, f: impl FnOnce(&mut SimNet) -> R) -> R {
        f(&mut self.lock())
    }

    /// Delivers pending network events and runs handlers until nothing
    /// more happens at the current instant.
    fn settle(&self) {
        loop {
            let mut progress = false;
            for (&ip, system) in &self.systems {
                if system.dispatch() > 0 {
                    progress = true;
                }
                let events = self.lock().take_outbox(ip);
                if !events.is_empty() {
                    progress = true;
                    system.handle_net_events(events);
                }
            }
            if !progress {
                return;
            }
        }
    }

    /// Processes the next instant at which anything happens, if it is no
    /// later than `limit`. Returns false when there is nothing left to do
    /// before `limit`.
    fn step(&self, limit: Duration) -> bool {
        self.settle();
        let net_next = self.lock().next_event_time();
        let timer_next = self.systems.values().filter_map(|s| s.next_deadline()).min();
        let Some(t) = [net_next, timer_next].into_iter().flatten().min() else {
            return false;
        };
        if t > limit {
            return false;
        }
        {
            let mut net = self.lock();
            if net_next == Some(t) {
                net.step();
            } else {
                net.advance_to(t);
            }
        }
        for system in self.systems.values() {
            system.fire_timers();
        }
        self.settle();
        true
    }

    /// Runs until simulated time `t`; the clock ends at `t`.
    pub fn run_until(&self, t: Duration) {
        while self.step(t) {}
        if self.now() < t {
            self.lock().advance_to(t);
        }
    }

    pub fn run_for(&self, d: Duration) {
        let t = self.now() + d;
        self.run_until(t);
    }

    /// Runs until no packet or timer is pending, or until `limit`.
    pub fn run_until_idle(&self, limit: Duration) {
        while self.step(limit) {}
    }

    /// Runs until `done` holds, checked after every step, or `limit`
    /// passes. Returns whether `done` held.
    pub fn run_while(&self, limit: Duration, mut done: impl FnMut() -> bool) -> bool {
        loop {
            if done() {
                return true;
            }
            if !self.step(limit) {
                return done();
            }
        }
    }
}
