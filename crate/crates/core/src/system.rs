//! The transport system: owns the network, every connection and listener,
//! the race cache, and the event queue. All state lives behind one lock;
//! handlers run with the lock released, one at a time, from [`dispatch`].
//!
//! [`dispatch`]: TransportSystem::dispatch

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use crate::adapters::msgmux::{AssocEvent, Association, Frame, FrameType, Role, MAGIC};
use crate::adapters::{FeatureMatrix, ProtocolId, MAX_DATAGRAM_PAYLOAD};
use crate::connection::{
    CloneErrorHandler, ConnHandler, ConnId, Connection, ConnectionState, Event, EventKind, GroupId, Listener,
    ListenerHandler, ListenerId, Message, MessageRef, ReceiveHandler,
};
use crate::error::{Error, Result};
use crate::framer::{Framer, FramerChain, MessageContext};
use crate::net::{
    AcceptorId, CarrierId, CarrierKind, CloseMode, MessageOptions, NetEvent, Network, RealNetwork, SendStatus,
};
use crate::properties::{ConnectionProperties, MessageProperties, TransportProperties, CAPACITY_PROFILE};
use crate::racing::{
    derive_candidates, eligible_protocols, CacheOutcome, CandidateStack, Race, RaceAction, RaceCache, RaceConfig,
    SystemPolicy,
};

/// Builds a fresh framer instance for each new connection.
pub(crate) type FramerFactory = Arc<dyn Fn() -> Box<dyn Framer> + Send + Sync>;

/// How long an accepted byte stream may stay silent before it is taken to
/// be plain TCP.
pub const SNIFF_TIMEOUT: Duration = Duration::from_millis(200);
/// Upper bound on one inbound message after framing.
pub const MAX_REASSEMBLY: usize = 16 * 1024 * 1024;
const MAX_POLL_WAIT: Duration = Duration::from_millis(20);

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub at: Duration,
    pub conn: ConnId,
    pub event: Event,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.6} conn={} {}", self.at.as_secs_f64(), self.conn, self.event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaceOutcome {
    Pending,
    Won,
    Failed(String),
    Cancelled,
}

/// One candidate attempt, as logged by the racing driver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceRecord {
    pub conn: ConnId,
    pub protocol: ProtocolId,
    pub remote: SocketAddr,
    pub started: Duration,
    pub outcome: RaceOutcome,
}

enum Pending {
    Conn {
        conn: ConnId,
        event: Event,
    },
    Received {
        conn: ConnId,
        handler: ReceiveHandler,
        msg: Message,
    },
    Accepted {
        listener: ListenerId,
        conn: ConnId,
    },
    CloneError {
        conn: ConnId,
        handler: Option<CloneErrorHandler>,
        cause: String,
    },
}

#[derive(Debug, Clone, Copy)]
enum Timer {
    Race(ConnId),
    Expiry { conn: ConnId, msg: u64 },
    Sniff(CarrierId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    None,
    Stream(CarrierId),
    Message(CarrierId),
    Datagram {
        carrier: CarrierId,
        peer: SocketAddr,
        shared: bool,
    },
    Mux {
        assoc: u64,
        stream: u32,
    },
}

#[derive(Debug, Clone, Copy)]
enum Owner {
    Attempt { conn: ConnId, idx: usize },
    Conn(ConnId),
    Mux(u64),
    Sniff,
    UdpListener(ListenerId),
}

struct OutMsg {
    id: u64,
    refs: Vec<MessageRef>,
    bytes: Vec<u8>,
    props: MessageProperties,
    deadline: Option<Duration>,
}

#[derive(Default)]
struct AttemptState {
    carrier: Option<CarrierId>,
    connected: bool,
    echo: Vec<u8>,
    log: usize,
}

struct RaceCtx {
    race: Race,
    candidates: Vec<CandidateStack>,
    attempts: Vec<AttemptState>,
    timer: Option<Duration>,
}

pub(crate) struct ConnState {
    pub(crate) state: ConnectionState,
    pub(crate) protocol: Option<ProtocolId>,
    pub(crate) remote: Option<SocketAddr>,
    pub(crate) group: GroupId,
    tp: TransportProperties,
    factories: Vec<FramerFactory>,
    framers: FramerChain,
    path: Path,
    race: Option<RaceCtx>,
    sendq: VecDeque<OutMsg>,
    blocked: bool,
    partial: Option<(Vec<u8>, Vec<MessageRef>)>,
    recv_requests: VecDeque<ReceiveHandler>,
    inbox: VecDeque<Message>,
    assembling: Vec<u8>,
    pub(crate) handlers: HashMap<EventKind, ConnHandler>,
    clone_error: Option<CloneErrorHandler>,
    listener: Option<ListenerId>,
}

impl ConnState {
    fn new(group: GroupId, tp: TransportProperties, factories: Vec<FramerFactory>) -> Self {
        let framers = FramerChain::new(factories.iter().map(|f| f()).collect());
        ConnState {
            state: ConnectionState::Establishing,
            protocol: None,
            remote: None,
            group,
            tp,
            factories,
            framers,
            path: Path::None,
            race: None,
            sendq: VecDeque::new(),
            blocked: false,
            partial: None,
            recv_requests: VecDeque::new(),
            inbox: VecDeque::new(),
            assembling: Vec::new(),
            handlers: HashMap::new(),
            clone_error: None,
            listener: None,
        }
    }

    pub(crate) fn pending_receives(&self) -> usize {
        self.recv_requests.len()
    }

    pub(crate) fn buffered_messages(&self) -> usize {
        self.inbox.len()
    }
}

struct Mux {
    carrier: CarrierId,
    assoc: Association,
    streams: BTreeMap<u32, ConnId>,
    listener: Option<ListenerId>,
    group: Option<GroupId>,
    peer: SocketAddr,
}

struct Sniff {
    listener: ListenerId,
    buf: Vec<u8>,
    peer: SocketAddr,
}

pub(crate) struct ListenerState {
    tp: TransportProperties,
    factories: Vec<FramerFactory>,
    pub(crate) protocols: Vec<ProtocolId>,
    stream_protocol: Option<ProtocolId>,
    msgmux: bool,
    acceptors: Vec<AcceptorId>,
    udp: Option<CarrierId>,
    udp_peers: HashMap<SocketAddr, ConnId>,
    pub(crate) handler: Option<ListenerHandler>,
    pub(crate) stopped: bool,
    pub(crate) local: Vec<(ProtocolId, SocketAddr)>,
}

pub(crate) struct GroupState {
    pub(crate) props: ConnectionProperties,
    pub(crate) members: Vec<ConnId>,
}

pub(crate) struct SystemState {
    net: Box<dyn Network>,
    matrix: FeatureMatrix,
    policy: SystemPolicy,
    pub(crate) cache: RaceCache,
    pub(crate) race_cfg: RaceConfig,
    pub(crate) conns: HashMap<ConnId, ConnState>,
    pub(crate) listeners: HashMap<ListenerId, ListenerState>,
    pub(crate) groups: HashMap<GroupId, GroupState>,
    owners: HashMap<CarrierId, Owner>,
    acceptors: HashMap<AcceptorId, ListenerId>,
    muxes: HashMap<u64, Mux>,
    sniffs: HashMap<CarrierId, Sniff>,
    timers: BTreeMap<(Duration, u64), Timer>,
    pending: VecDeque<Pending>,
    pub(crate) trace: Vec<TraceRecord>,
    pub(crate) race_log: Vec<RaceRecord>,
    verbose: bool,
    next_id: u64,
}

/// Handle to a transport system. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct TransportSystem {
    inner: Arc<Mutex<SystemState>>,
    stop: Arc<AtomicBool>,
}

impl fmt::Debug for TransportSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransportSystem").finish_non_exhaustive()
    }
}

impl TransportSystem {
    /// A system over the host's sockets with TCP, UDP and MSGMUX, and the
    /// policy named by `TAPS_POLICY_FILE`.
    pub fn new() -> Result<Self> {
        Ok(Self::with_network(
            Box::new(RealNetwork::new()?),
            FeatureMatrix::host(),
            SystemPolicy::from_env()?,
        ))
    }

    pub fn with_network(net: Box<dyn Network>, matrix: FeatureMatrix, policy: SystemPolicy) -> Self {
        let state = SystemState {
            net,
            matrix,
            policy,
            cache: RaceCache::default(),
            race_cfg: RaceConfig::default(),
            conns: HashMap::new(),
            listeners: HashMap::new(),
            groups: HashMap::new(),
            owners: HashMap::new(),
            acceptors: HashMap::new(),
            muxes: HashMap::new(),
            sniffs: HashMap::new(),
            timers: BTreeMap::new(),
            pending: VecDeque::new(),
            trace: Vec::new(),
            race_log: Vec::new(),
            verbose: false,
            next_id: 1,
        };
        TransportSystem {
            inner: Arc::new(Mutex::new(state)),
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, SystemState> {
        self.inner.lock().expect("transport system lock poisoned")
    }

    pub fn matrix(&self) -> FeatureMatrix {
        self.lock().matrix.clone()
    }

    pub fn policy(&self) -> SystemPolicy {
        self.lock().policy.clone()
    }

    pub fn set_policy(&self, policy: SystemPolicy) {
        self.lock().policy = policy;
    }

    pub fn race_config(&self) -> RaceConfig {
        self.lock().race_cfg
    }

    pub fn set_race_config(&self, cfg: RaceConfig) {
        self.lock().race_cfg = cfg;
    }

    pub fn cache(&self) -> RaceCache {
        self.lock().cache.clone()
    }

    pub fn clear_cache(&self) {
        self.lock().cache.clear();
    }

    /// Prints every trace record to standard error as it happens.
    pub fn set_verbose(&self, verbose: bool) {
        self.lock().verbose = verbose;
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.lock().trace.clone()
    }

    pub fn race_log(&self) -> Vec<RaceRecord> {
        self.lock().race_log.clone()
    }

    pub fn now(&self) -> Duration {
        self.lock().net.now()
    }

    /// Earliest pending timer.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.lock().timers.keys().next().map(|k| k.0)
    }

    pub fn has_pending_events(&self) -> bool {
        !self.lock().pending.is_empty()
    }

    /// Feeds network events into the state machines. Handlers are not run.
    pub fn handle_net_events(&self, events: Vec<NetEvent>) {
        let mut st = self.lock();
        for ev in events {
            st.on_net(ev);
        }
    }

    /// Fires every timer due at the network's current time.
    pub fn fire_timers(&self) {
        self.lock().fire_timers();
    }

    /// Runs queued event handlers until the queue is empty. Returns how
    /// many events were delivered.
    pub fn dispatch(&self) -> usize {
        let mut n = 0;
        loop {
            let item = self.lock().pending.pop_front();
            let Some(item) = item else { return n };
            n += 1;
            match item {
                Pending::Conn { conn, event } => {
                    let kind = event.kind();
                    let handler = self.lock().conns.get_mut(&conn).and_then(|c| c.handlers.remove(&kind));
                    if let Some(mut h) = handler {
                        h(&Connection::new(self.clone(), conn), &event);
                        if let Some(c) = self.lock().conns.get_mut(&conn) {
                            c.handlers.entry(kind).or_insert(h);
                        }
                    }
                }
                Pending::Received { conn, handler, msg } => handler(&Connection::new(self.clone(), conn), msg),
                Pending::Accepted { listener, conn } => {
                    let handler = {
                        let mut st = self.lock();
                        let stopped = st.listeners.get(&listener).is_none_or(|l| l.stopped);
                        if stopped {
                            st.abort_conn(conn);
                            continue;
                        }
                        st.listeners.get_mut(&listener).and_then(|l| l.handler.take())
                    };
                    if let Some(mut h) = handler {
                        h(
                            &Listener::new(self.clone(), listener),
                            Connection::new(self.clone(), conn),
                        );
                        if let Some(l) = self.lock().listeners.get_mut(&listener) {
                            if l.handler.is_none() {
                                l.handler = Some(h);
                            }
                        }
                    }
                }
                Pending::CloneError { conn, handler, cause } => {
                    if let Some(h) = handler {
                        h(&Connection::new(self.clone(), conn), &cause);
                    }
                }
            }
        }
    }

    /// Waits for network activity (bounded by the next timer and
    /// `max_wait`), then processes it. Real networks only.
    pub fn poll_once(&self, max_wait: Duration) -> Result<()> {
        let mut st = self.lock();
        let now = st.net.now();
        let mut wait = max_wait;
        if let Some(&(at, _)) = st.timers.keys().next() {
            wait = wait.min(at.saturating_sub(now));
        }
        if !st.pending.is_empty() {
            wait = Duration::ZERO;
        }
        let events = st.net.poll(Some(wait))?;
        for ev in events {
            st.on_net(ev);
        }
        st.fire_timers();
        Ok(())
    }

    /// Runs the event loop until [`TransportSystem::stop`] is called.
    pub fn run(&self) -> Result<()> {
        self.run_until(|| false)
    }

    /// Runs the event loop until `done` returns true (checked after every
    /// round of handlers) or [`TransportSystem::stop`] is called.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> Result<()> {
        self.stop.store(false, Ordering::SeqCst);
        loop {
            self.dispatch();
            if done() || self.stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            self.poll_once(MAX_POLL_WAIT)?;
        }
    }

    /// Runs the event loop for at most `limit` of network time.
    pub fn run_for(&self, limit: Duration) -> Result<()> {
        let end = self.now() + limit;
        self.run_until(|| self.now() >= end)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Stops every listener and closes every open connection gracefully.
    pub fn close_all(&self) {
        let mut st = self.lock();
        let listeners: Vec<ListenerId> = st.listeners.keys().copied().collect();
        for l in listeners {
            st.stop_listener(l);
        }
        let conns: Vec<ConnId> = st.conns.keys().copied().collect();
        for c in conns {
            st.close(c);
        }
    }

    /// Connections not yet closed.
    pub fn open_connections(&self) -> usize {
        self.lock()
            .conns
            .values()
            .filter(|c| c.state != ConnectionState::Closed)
            .count()
    }
}

impl SystemState {
    fn id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub(crate) fn now(&self) -> Duration {
        self.net.now()
    }

    fn schedule(&mut self, at: Duration, timer: Timer) {
        let seq = self.id();
        self.timers.insert((at, seq), timer);
    }

    fn emit(&mut self, conn: ConnId, event: Event) {
        let record = TraceRecord {
            at: self.net.now(),
            conn,
            event: event.clone(),
        };
        if self.verbose {
            eprintln!("{record}");
        }
        self.trace.push(record);
        self.pending.push_back(Pending::Conn { conn, event });
    }

    fn fire_timers(&mut self) {
        let now = self.net.now();
        while let Some((&key, _)) = self.timers.iter().next() {
            if key.0 > now {
                break;
            }
            let timer = self.timers.remove(&key).unwrap();
            match timer {
                Timer::Race(conn) => self.race_tick(conn),
                Timer::Expiry { conn, msg } => self.expire(conn, msg),
                Timer::Sniff(carrier) => self.sniff_timeout(carrier),
            }
        }
    }

    pub(crate) fn new_group(&mut self) -> GroupId {
        let g = GroupId(self.id());
        self.groups.insert(
            g,
            GroupState {
                props: ConnectionProperties::default(),
                members: Vec::new(),
            },
        );
        g
    }

    fn add_conn(&mut self, group: GroupId, mut conn: ConnState) -> ConnId {
        let id = ConnId(self.id());
        conn.group = group;
        self.groups.entry(group).or_insert_with(|| GroupState {
            props: ConnectionProperties::default(),
            members: Vec::new(),
        });
        self.groups.get_mut(&group).unwrap().members.push(id);
        self.conns.insert(id, conn);
        id
    }

    // ---- establishment -------------------------------------------------

    pub(crate) fn resolve(&mut self, host: &str, port: u16) -> Result<Vec<SocketAddr>> {
        self.net.resolve(host, port)
    }

    pub(crate) fn initiate(
        &mut self,
        tp: &TransportProperties,
        remotes: &[SocketAddr],
        factories: Vec<FramerFactory>,
        early: Option<(Vec<u8>, MessageProperties)>,
    ) -> Result<ConnId> {
        let now = self.now();
        let candidates = derive_candidates(tp, remotes, &self.matrix, &self.policy, &self.cache, now)?;
        let group = self.new_group();
        let conn = ConnState::new(group, tp.clone(), factories);
        let id = self.add_conn(group, conn);
        if let Some((data, props)) = early {
            let r = MessageRef(self.id());
            self.enqueue(id, vec![r], data, props);
        }
        self.start_race(id, candidates);
        Ok(id)
    }

    fn start_race(&mut self, conn: ConnId, candidates: Vec<CandidateStack>) {
        let cfg = self.race_cfg;
        let n = candidates.len();
        let now = self.now();
        let mut race = Race::new(n, cfg);
        let actions = race.start(now);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.race = Some(RaceCtx {
                race,
                candidates,
                attempts: (0..n).map(|_| AttemptState::default()).collect(),
                timer: None,
            });
        }
        self.apply_race(conn, actions, false);
    }

    fn race_tick(&mut self, conn: ConnId) {
        let now = self.now();
        let Some(ctx) = self.conns.get_mut(&conn).and_then(|c| c.race.as_mut()) else {
            return;
        };
        ctx.timer = None;
        let actions = ctx.race.poll(now);
        self.apply_race(conn, actions, true);
    }

    /// Carries out race actions. `from_timer` marks cancellations that are
    /// timeouts rather than losers being torn down.
    fn apply_race(&mut self, conn: ConnId, actions: Vec<RaceAction>, from_timer: bool) {
        let mut work: VecDeque<(RaceAction, bool)> = actions.into_iter().map(|a| (a, from_timer)).collect();
        while let Some((action, timeout)) = work.pop_front() {
            let now = self.now();
            match action {
                RaceAction::Start(i) => match self.start_attempt(conn, i) {
                    Ok(true) => {
                        let more = self
                            .race_mut(conn)
                            .map(|r| r.race.succeeded(i, now))
                            .unwrap_or_default();
                        work.extend(more.into_iter().map(|a| (a, false)));
                    }
                    Ok(false) => {}
                    Err(e) => {
                        let cause = e.to_string();
                        self.record_attempt_failure(conn, i, &cause);
                        let more = self
                            .race_mut(conn)
                            .map(|r| r.race.failed(i, cause, now))
                            .unwrap_or_default();
                        work.extend(more.into_iter().map(|a| (a, false)));
                    }
                },
                RaceAction::Cancel(i) => self.cancel_attempt(conn, i, timeout),
                RaceAction::Won(i) => self.attempt_won(conn, i),
                RaceAction::Failed(causes) => self.race_failed(conn, causes),
            }
        }
        self.rearm_race_timer(conn);
    }

    fn race_mut(&mut self, conn: ConnId) -> Option<&mut RaceCtx> {
        self.conns.get_mut(&conn).and_then(|c| c.race.as_mut())
    }

    fn rearm_race_timer(&mut self, conn: ConnId) {
        let Some(ctx) = self.race_mut(conn) else { return };
        if ctx.race.is_finished() {
            if ctx.attempts.iter().all(|a| a.carrier.is_none()) {
                self.conns.get_mut(&conn).unwrap().race = None;
            }
            return;
        }
        let next = ctx.race.next_deadline();
        if let Some(t) = next.filter(|_| next != ctx.timer) {
            ctx.timer = next;
            self.schedule(t, Timer::Race(conn));
        }
    }

    fn start_attempt(&mut self, conn: ConnId, idx: usize) -> Result<bool> {
        let now = self.now();
        let cand = self
            .race_mut(conn)
            .map(|r| r.candidates[idx].clone())
            .ok_or(Error::Closed)?;
        let log = self.race_log.len();
        self.race_log.push(RaceRecord {
            conn,
            protocol: cand.protocol,
            remote: cand.remote,
            started: now,
            outcome: RaceOutcome::Pending,
        });
        self.race_mut(conn).unwrap().attempts[idx].log = log;
        let (carrier, immediate) = match cand.protocol {
            ProtocolId::Udp => (self.net.bind_datagram(unspecified(cand.remote))?, true),
            ProtocolId::SimMsg => (self.net.connect(CarrierKind::Message, cand.remote)?, false),
            _ => (self.net.connect(CarrierKind::Stream, cand.remote)?, false),
        };
        self.owners.insert(carrier, Owner::Attempt { conn, idx });
        let att = &mut self.race_mut(conn).unwrap().attempts[idx];
        att.carrier = Some(carrier);
        att.connected = immediate;
        Ok(immediate)
    }

    fn record_attempt_failure(&mut self, conn: ConnId, idx: usize, cause: &str) {
        let now = self.now();
        let Some(ctx) = self.race_mut(conn) else { return };
        let cand = ctx.candidates[idx].clone();
        let log = ctx.attempts[idx].log;
        self.cache
            .record(cand.remote, cand.protocol, CacheOutcome::Unsupported, now);
        if let Some(r) = self.race_log.get_mut(log) {
            if r.conn == conn && r.outcome == RaceOutcome::Pending {
                r.outcome = RaceOutcome::Failed(cause.to_owned());
            }
        }
    }

    fn attempt_connected(&mut self, conn: ConnId, idx: usize) {
        let now = self.now();
        let Some(ctx) = self.race_mut(conn) else { return };
        let protocol = ctx.candidates[idx].protocol;
        let att = &mut ctx.attempts[idx];
        att.connected = true;
        let carrier = att.carrier.unwrap();
        if protocol == ProtocolId::Msgmux {
            if let Err(e) = self.net.send(carrier, MAGIC, MessageOptions::default()) {
                self.attempt_failed(conn, idx, &e.to_string());
            }
            return;
        }
        let actions = ctx.race.succeeded(idx, now);
        if actions.is_empty() {
            self.cancel_attempt(conn, idx, false);
        } else {
            self.apply_race(conn, actions, false);
        }
    }

    fn attempt_data(&mut self, conn: ConnId, idx: usize, bytes: Vec<u8>) {
        let now = self.now();
        let Some(ctx) = self.race_mut(conn) else { return };
        if ctx.candidates[idx].protocol != ProtocolId::Msgmux {
            return;
        }
        let att = &mut ctx.attempts[idx];
        att.echo.extend_from_slice(&bytes);
        let n = att.echo.len().min(MAGIC.len());
        if att.echo[..n] != MAGIC[..n] {
            self.attempt_failed(conn, idx, &Error::HandshakeMismatch.to_string());
            return;
        }
        if n < MAGIC.len() {
            return;
        }
        let actions = ctx.race.succeeded(idx, now);
        if actions.is_empty() {
            self.cancel_attempt(conn, idx, false);
        } else {
            self.apply_race(conn, actions, false);
        }
    }

    fn attempt_failed(&mut self, conn: ConnId, idx: usize, cause: &str) {
        let now = self.now();
        self.record_attempt_failure(conn, idx, cause);
        let Some(ctx) = self.race_mut(conn) else { return };
        let carrier = ctx.attempts[idx].carrier.take();
        let actions = ctx.race.failed(idx, cause, now);
        if let Some(c) = carrier {
            self.owners.remove(&c);
            self.net.close(c, CloseMode::Abort);
        }
        self.apply_race(conn, actions, false);
    }

    fn cancel_attempt(&mut self, conn: ConnId, idx: usize, timeout: bool) {
        if timeout {
            self.record_attempt_failure(conn, idx, "timed out");
        }
        let Some(ctx) = self.race_mut(conn) else { return };
        let protocol = ctx.candidates[idx].protocol;
        let att = &mut ctx.attempts[idx];
        let carrier = att.carrier.take();
        let connected = att.connected;
        let log = att.log;
        if let Some(r) = self.race_log.get_mut(log) {
            if r.conn == conn && r.outcome == RaceOutcome::Pending {
                r.outcome = RaceOutcome::Cancelled;
            }
        }
        let Some(c) = carrier else { return };
        self.owners.remove(&c);
        match protocol {
            ProtocolId::Msgmux if connected => {
                let _ = self.net.send(
                    c,
                    &Frame::control(FrameType::GoAway, 0).encode(),
                    MessageOptions::default(),
                );
                self.net.close(c, CloseMode::Graceful);
            }
            _ if connected => self.net.close(c, CloseMode::Graceful),
            _ => self.net.close(c, CloseMode::Abort),
        }
    }

    fn attempt_won(&mut self, conn: ConnId, idx: usize) {
        let now = self.now();
        let Some(ctx) = self.race_mut(conn) else { return };
        let cand = ctx.candidates[idx].clone();
        let att = &mut ctx.attempts[idx];
        let carrier = att.carrier.take().expect("winning attempt has a carrier");
        let leftover = att.echo.split_off(MAGIC.len().min(att.echo.len()));
        let log = att.log;
        self.cache
            .record(cand.remote, cand.protocol, CacheOutcome::Supported, now);
        if let Some(r) = self.race_log.get_mut(log) {
            r.outcome = RaceOutcome::Won;
        }
        let path = match cand.protocol {
            ProtocolId::Msgmux => {
                let mut assoc = Association::new(Role::Initiator);
                let mut out = Vec::new();
                let stream = assoc.open_stream(&mut out).expect("fresh association has streams");
                let _ = self.net.send(carrier, &out, MessageOptions::default());
                let aid = self.id();
                let group = self.conns[&conn].group;
                let mut streams = BTreeMap::new();
                streams.insert(stream, conn);
                self.muxes.insert(
                    aid,
                    Mux {
                        carrier,
                        assoc,
                        streams,
                        listener: None,
                        group: Some(group),
                        peer: cand.remote,
                    },
                );
                self.owners.insert(carrier, Owner::Mux(aid));
                Path::Mux { assoc: aid, stream }
            }
            ProtocolId::Udp => {
                self.owners.insert(carrier, Owner::Conn(conn));
                Path::Datagram {
                    carrier,
                    peer: cand.remote,
                    shared: false,
                }
            }
            ProtocolId::SimMsg => {
                self.owners.insert(carrier, Owner::Conn(conn));
                Path::Message(carrier)
            }
            _ => {
                self.owners.insert(carrier, Owner::Conn(conn));
                Path::Stream(carrier)
            }
        };
        let c = self.conns.get_mut(&conn).unwrap();
        c.protocol = Some(cand.protocol);
        c.remote = Some(cand.remote);
        c.path = path;
        self.become_established(conn, true);
        if !leftover.is_empty() {
            if let Path::Mux { assoc, .. } = path {
                self.mux_inbound(assoc, &leftover);
            }
        }
    }

    fn race_failed(&mut self, conn: ConnId, causes: Vec<(usize, String)>) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        let cause = if causes.is_empty() {
            "no candidates".to_owned()
        } else {
            let names: Vec<String> = causes
                .iter()
                .map(|(i, cause)| {
                    let p = c
                        .race
                        .as_ref()
                        .map(|r| r.candidates[*i].protocol.as_str())
                        .unwrap_or("?");
                    format!("{p}: {cause}")
                })
                .collect();
            names.join("; ")
        };
        c.state = ConnectionState::Closed;
        let handler = c.clone_error.take();
        let dropped = self.drop_queued(conn);
        for r in dropped {
            self.emit(conn, Event::SendError(r, "establishment failed".into()));
        }
        if let Some(h) = handler {
            self.clone_error(conn, Some(h), cause);
        } else {
            self.emit(conn, Event::EstablishmentError(cause));
        }
    }

    fn clone_error(&mut self, conn: ConnId, handler: Option<CloneErrorHandler>, cause: String) {
        let record = TraceRecord {
            at: self.now(),
            conn,
            event: Event::CloneError(cause.clone()),
        };
        if self.verbose {
            eprintln!("{record}");
        }
        self.trace.push(record);
        self.pending.push_back(Pending::CloneError { conn, handler, cause });
    }

    fn become_established(&mut self, conn: ConnId, ready: bool) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        c.state = ConnectionState::Established;
        c.framers.start();
        self.apply_dscp(conn);
        if ready {
            self.emit(conn, Event::Ready);
        }
        self.flush(conn);
    }

    fn carrier_of(&self, conn: ConnId) -> Option<CarrierId> {
        match self.conns.get(&conn)?.path {
            Path::Stream(c) | Path::Message(c) => Some(c),
            Path::Datagram { carrier, .. } => Some(carrier),
            Path::Mux { assoc, .. } => self.muxes.get(&assoc).map(|m| m.carrier),
            Path::None => None,
        }
    }

    fn apply_dscp(&mut self, conn: ConnId) {
        let Some(group) = self.conns.get(&conn).map(|c| c.group) else {
            return;
        };
        let dscp = self.groups[&group].props.capacity_profile().dscp();
        if let Some(carrier) = self.carrier_of(conn) {
            self.net.set_dscp(carrier, dscp);
        }
    }

    // ---- listening -----------------------------------------------------

    pub(crate) fn listen(
        &mut self,
        tp: &TransportProperties,
        mut local: SocketAddr,
        factories: Vec<FramerFactory>,
    ) -> Result<ListenerId> {
        let protocols: Vec<ProtocolId> = eligible_protocols(tp, &self.matrix, &self.policy)
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        if protocols.is_empty() {
            return Err(Error::NoCandidates);
        }
        let id = ListenerId(self.id());
        let stream_protocol = [ProtocolId::Tcp, ProtocolId::SimStream]
            .into_iter()
            .find(|p| protocols.contains(p));
        let msgmux = protocols.contains(&ProtocolId::Msgmux);
        let mut acceptors = Vec::new();
        let mut udp = None;
        let mut bound = Vec::new();
        let bind_fail = |protocol: ProtocolId, e: Error| Error::BindFailure {
            protocol,
            cause: e.to_string(),
        };
        let result: Result<()> = (|| {
            if stream_protocol.is_some() || msgmux {
                let p = if msgmux {
                    ProtocolId::Msgmux
                } else {
                    stream_protocol.unwrap()
                };
                let a = self
                    .net
                    .listen(CarrierKind::Stream, local)
                    .map_err(|e| bind_fail(p, e))?;
                acceptors.push(a);
                let addr = self.net.acceptor_addr(a).unwrap_or(local);
                local.set_port(addr.port());
                if msgmux {
                    bound.push((ProtocolId::Msgmux, addr));
                }
                if let Some(sp) = stream_protocol {
                    bound.push((sp, addr));
                }
            }
            if protocols.contains(&ProtocolId::SimMsg) {
                let a = self
                    .net
                    .listen(CarrierKind::Message, local)
                    .map_err(|e| bind_fail(ProtocolId::SimMsg, e))?;
                acceptors.push(a);
                let addr = self.net.acceptor_addr(a).unwrap_or(local);
                local.set_port(addr.port());
                bound.push((ProtocolId::SimMsg, addr));
            }
            if protocols.contains(&ProtocolId::Udp) {
                let c = self
                    .net
                    .bind_datagram(local)
                    .map_err(|e| bind_fail(ProtocolId::Udp, e))?;
                udp = Some(c);
                bound.push((ProtocolId::Udp, self.net.local_addr(c).unwrap_or(local)));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for a in acceptors {
                self.net.close_acceptor(a);
            }
            if let Some(c) = udp {
                self.net.close(c, CloseMode::Graceful);
            }
            return Err(e);
        }
        for &a in &acceptors {
            self.acceptors.insert(a, id);
        }
        if let Some(c) = udp {
            self.owners.insert(c, Owner::UdpListener(id));
        }
        self.listeners.insert(
            id,
            ListenerState {
                tp: tp.clone(),
                factories,
                protocols,
                stream_protocol,
                msgmux,
                acceptors,
                udp,
                udp_peers: HashMap::new(),
                handler: None,
                stopped: false,
                local: bound,
            },
        );
        Ok(id)
    }

    pub(crate) fn stop_listener(&mut self, id: ListenerId) {
        let Some(l) = self.listeners.get_mut(&id) else { return };
        if l.stopped {
            return;
        }
        l.stopped = true;
        let acceptors = std::mem::take(&mut l.acceptors);
        let udp = l.udp.take();
        for a in acceptors {
            self.acceptors.remove(&a);
            self.net.close_acceptor(a);
        }
        if let Some(c) = udp {
            // Connections that share the socket keep it open.
            let shared = self.listeners[&id]
                .udp_peers
                .values()
                .any(|c| self.conns.get(c).is_some_and(|c| c.state != ConnectionState::Closed));
            if !shared {
                self.owners.remove(&c);
                self.net.close(c, CloseMode::Graceful);
            }
        }
        let sniffing: Vec<CarrierId> = self
            .sniffs
            .iter()
            .filter(|(_, s)| s.listener == id)
            .map(|(&c, _)| c)
            .collect();
        for c in sniffing {
            self.sniffs.remove(&c);
            self.owners.remove(&c);
            self.net.close(c, CloseMode::Abort);
        }
    }

    fn listener_conn(&mut self, listener: ListenerId, group: Option<GroupId>) -> Option<(ConnId, GroupId)> {
        let l = self.listeners.get(&listener)?;
        if l.stopped {
            return None;
        }
        let conn = ConnState::new(GroupId(0), l.tp.clone(), l.factories.clone());
        let group = group.unwrap_or_else(|| self.new_group());
        let id = self.add_conn(group, conn);
        self.conns.get_mut(&id).unwrap().listener = Some(listener);
        Some((id, group))
    }

    fn announce(&mut self, listener: ListenerId, conn: ConnId) {
        let record = TraceRecord {
            at: self.now(),
            conn,
            event: Event::ConnectionReceived(conn),
        };
        if self.verbose {
            eprintln!("{record}");
        }
        self.trace.push(record);
        self.pending.push_back(Pending::Accepted { listener, conn });
    }

    fn on_accepted(
        &mut self,
        acceptor: Option<AcceptorId>,
        carrier: CarrierId,
        peer: SocketAddr,
        sibling_of: Option<CarrierId>,
    ) {
        if let Some(sib) = sibling_of {
            let sibling_conn = match self.owners.get(&sib) {
                Some(Owner::Conn(c)) => Some(*c),
                _ => None,
            };
            let target = sibling_conn.and_then(|c| {
                let sc = &self.conns[&c];
                sc.listener.map(|l| (l, sc.group))
            });
            match target.and_then(|(l, g)| self.listener_conn(l, Some(g)).map(|(id, _)| (l, id))) {
                Some((l, id)) => {
                    self.owners.insert(carrier, Owner::Conn(id));
                    let c = self.conns.get_mut(&id).unwrap();
                    c.protocol = Some(ProtocolId::SimMsg);
                    c.remote = Some(peer);
                    c.path = Path::Message(carrier);
                    self.become_established(id, false);
                    self.announce(l, id);
                }
                None => self.net.close(carrier, CloseMode::Abort),
            }
            return;
        }
        let Some(listener) = acceptor.and_then(|a| self.acceptors.get(&a).copied()) else {
            self.net.close(carrier, CloseMode::Abort);
            return;
        };
        let is_stream = {
            let l = &self.listeners[&listener];
            // The first acceptor is the stream acceptor whenever one exists.
            l.stream_protocol.is_some() || l.msgmux
        } && acceptor == self.listeners[&listener].acceptors.first().copied();
        if is_stream {
            self.sniffs.insert(
                carrier,
                Sniff {
                    listener,
                    buf: Vec::new(),
                    peer,
                },
            );
            self.owners.insert(carrier, Owner::Sniff);
            let at = self.now() + SNIFF_TIMEOUT;
            self.schedule(at, Timer::Sniff(carrier));
        } else {
            let Some((id, _)) = self.listener_conn(listener, None) else {
                self.net.close(carrier, CloseMode::Abort);
                return;
            };
            self.owners.insert(carrier, Owner::Conn(id));
            let c = self.conns.get_mut(&id).unwrap();
            c.protocol = Some(ProtocolId::SimMsg);
            c.remote = Some(peer);
            c.path = Path::Message(carrier);
            self.become_established(id, false);
            self.announce(listener, id);
        }
    }

    fn sniff_data(&mut self, carrier: CarrierId, bytes: &[u8]) {
        let Some(s) = self.sniffs.get_mut(&carrier) else { return };
        s.buf.extend_from_slice(bytes);
        let n = s.buf.len().min(MAGIC.len());
        if s.buf[..n] != MAGIC[..n] {
            self.accept_byte_stream(carrier);
            return;
        }
        if n < MAGIC.len() {
            return;
        }
        let s = self.sniffs.remove(&carrier).unwrap();
        let l = &self.listeners[&s.listener];
        if !l.msgmux || l.stopped {
            // A TAPS peer without MSGMUX refuses the handshake outright.
            self.owners.remove(&carrier);
            self.net.close(carrier, CloseMode::Abort);
            return;
        }
        let _ = self.net.send(carrier, MAGIC, MessageOptions::default());
        let aid = self.id();
        self.muxes.insert(
            aid,
            Mux {
                carrier,
                assoc: Association::new(Role::Acceptor),
                streams: BTreeMap::new(),
                listener: Some(s.listener),
                group: None,
                peer: s.peer,
            },
        );
        self.owners.insert(carrier, Owner::Mux(aid));
        let rest = s.buf[MAGIC.len()..].to_vec();
        if !rest.is_empty() {
            self.mux_inbound(aid, &rest);
        }
    }

    fn sniff_timeout(&mut self, carrier: CarrierId) {
        if self.sniffs.contains_key(&carrier) {
            self.accept_byte_stream(carrier);
        }
    }

    /// Takes a sniffed carrier as a plain byte stream. Returns the new
    /// connection, if the listener accepts byte streams.
    fn accept_byte_stream(&mut self, carrier: CarrierId) -> Option<ConnId> {
        let s = self.sniffs.remove(&carrier)?;
        let protocol = self.listeners.get(&s.listener).and_then(|l| l.stream_protocol);
        let accepted = protocol.and_then(|p| self.listener_conn(s.listener, None).map(|(id, _)| (p, id)));
        let Some((protocol, id)) = accepted else {
            self.owners.remove(&carrier);
            self.net.close(carrier, CloseMode::Abort);
            return None;
        };
        self.owners.insert(carrier, Owner::Conn(id));
        let c = self.conns.get_mut(&id).unwrap();
        c.protocol = Some(protocol);
        c.remote = Some(s.peer);
        c.path = Path::Stream(carrier);
        self.become_established(id, false);
        self.announce(s.listener, id);
        if !s.buf.is_empty() {
            self.conn_inbound(id, &s.buf, false);
        }
        Some(id)
    }

    fn udp_listener_datagram(&mut self, listener: ListenerId, carrier: CarrierId, from: SocketAddr, data: Vec<u8>) {
        let existing = self
            .listeners
            .get(&listener)
            .and_then(|l| l.udp_peers.get(&from).copied());
        if let Some(conn) = existing {
            self.conn_inbound(conn, &data, true);
            return;
        }
        let Some((id, _)) = self.listener_conn(listener, None) else {
            return;
        };
        self.listeners.get_mut(&listener).unwrap().udp_peers.insert(from, id);
        let c = self.conns.get_mut(&id).unwrap();
        c.protocol = Some(ProtocolId::Udp);
        c.remote = Some(from);
        c.path = Path::Datagram {
            carrier,
            peer: from,
            shared: true,
        };
        self.become_established(id, false);
        self.announce(listener, id);
        self.conn_inbound(id, &data, true);
    }

    // ---- MSGMUX associations -------------------------------------------

    fn mux_write(&mut self, assoc: u64, out: &[u8]) -> Result<()> {
        if out.is_empty() {
            return Ok(());
        }
        let carrier = self.muxes.get(&assoc).ok_or(Error::AssociationClosed)?.carrier;
        self.net.send(carrier, out, MessageOptions::default()).map(|_| ())
    }

    fn mux_inbound(&mut self, aid: u64, bytes: &[u8]) {
        let Some(mux) = self.muxes.get_mut(&aid) else { return };
        let events = match mux.assoc.receive(bytes) {
            Ok(events) => events,
            Err(e) => {
                self.mux_down(aid, Some(e.to_string()));
                return;
            }
        };
        for ev in events {
            match ev {
                AssocEvent::StreamOpened(stream) => {
                    let mux = &self.muxes[&aid];
                    let (listener, group, peer) = (mux.listener, mux.group, mux.peer);
                    let created = listener.and_then(|l| self.listener_conn(l, group).map(|(id, g)| (l, id, g)));
                    let Some((l, id, g)) = created else {
                        let mut out = Vec::new();
                        self.muxes.get_mut(&aid).unwrap().assoc.reset_stream(stream, &mut out);
                        let _ = self.mux_write(aid, &out);
                        continue;
                    };
                    let mux = self.muxes.get_mut(&aid).unwrap();
                    mux.group = Some(g);
                    mux.streams.insert(stream, id);
                    let c = self.conns.get_mut(&id).unwrap();
                    c.protocol = Some(ProtocolId::Msgmux);
                    c.remote = Some(peer);
                    c.path = Path::Mux { assoc: aid, stream };
                    self.become_established(id, false);
                    self.announce(l, id);
                }
                AssocEvent::Message { stream_id, data } => {
                    if let Some(&conn) = self.muxes.get(&aid).and_then(|m| m.streams.get(&stream_id)) {
                        self.conn_inbound(conn, &data, true);
                    }
                }
                AssocEvent::StreamClosed(stream) => {
                    if let Some(conn) = self.muxes.get_mut(&aid).and_then(|m| m.streams.remove(&stream)) {
                        self.peer_closed(conn);
                    }
                    self.mux_maybe_finish(aid);
                }
                AssocEvent::StreamReset(stream) => {
                    if let Some(conn) = self.muxes.get_mut(&aid).and_then(|m| m.streams.remove(&stream)) {
                        self.conn_failed(conn, "stream reset by peer".into());
                    }
                    self.mux_maybe_finish(aid);
                }
                AssocEvent::GoAway => self.mux_maybe_finish(aid),
            }
        }
    }

    /// Closes the carrier once an association has no streams left and is
    /// either ours to end or told to go away.
    fn mux_maybe_finish(&mut self, aid: u64) {
        let Some(mux) = self.muxes.get_mut(&aid) else { return };
        if !mux.streams.is_empty() {
            return;
        }
        if mux.assoc.role() == Role::Acceptor && !mux.assoc.is_going_away() {
            return;
        }
        let mut out = Vec::new();
        mux.assoc.goaway(&mut out);
        let carrier = mux.carrier;
        let _ = self.net.send(carrier, &out, MessageOptions::default());
        self.net.close(carrier, CloseMode::Graceful);
        self.owners.remove(&carrier);
        self.muxes.remove(&aid);
    }

    /// The carrier under an association ended. `error` is `None` for an
    /// orderly close.
    fn mux_down(&mut self, aid: u64, error: Option<String>) {
        let Some(mux) = self.muxes.remove(&aid) else { return };
        self.owners.remove(&mux.carrier);
        self.net.close(
            mux.carrier,
            if error.is_some() {
                CloseMode::Abort
            } else {
                CloseMode::Graceful
            },
        );
        for (_, conn) in mux.streams {
            match &error {
                Some(cause) => self.conn_failed(conn, cause.clone()),
                None => self.peer_closed(conn),
            }
        }
    }

    // ---- data path -----------------------------------------------------

    pub(crate) fn send(
        &mut self,
        conn: ConnId,
        data: &[u8],
        props: MessageProperties,
        is_end: bool,
    ) -> Result<MessageRef> {
        let c = self.conns.get_mut(&conn).ok_or(Error::Closed)?;
        match c.state {
            ConnectionState::Established => {}
            ConnectionState::Establishing => return Err(Error::NotEstablished),
            _ => return Err(Error::Closed),
        }
        let r = MessageRef(self.next_id);
        self.next_id += 1;
        let c = self.conns.get_mut(&conn).unwrap();
        if !is_end {
            let (buf, refs) = c.partial.get_or_insert_with(Default::default);
            buf.extend_from_slice(data);
            refs.push(r);
            return Ok(r);
        }
        let (mut buf, mut refs) = c.partial.take().unwrap_or_default();
        if buf.is_empty() && refs.is_empty() && data.is_empty() {
            return Err(Error::InvalidMessage("empty message"));
        }
        buf.extend_from_slice(data);
        refs.push(r);
        self.enqueue(conn, refs, buf, props);
        self.flush(conn);
        Ok(r)
    }

    /// Frames a complete message and queues it for handoff.
    fn enqueue(&mut self, conn: ConnId, refs: Vec<MessageRef>, data: Vec<u8>, props: MessageProperties) {
        let now = self.now();
        let id = self.id();
        let c = self.conns.get_mut(&conn).unwrap();
        let ctx = MessageContext {
            props,
            remote: c.remote,
        };
        let bytes = match c.framers.frame_outbound(&data, &ctx, true) {
            Ok(b) => b,
            Err(e) => {
                for r in refs {
                    self.emit(conn, Event::SendError(r, e.to_string()));
                }
                return;
            }
        };
        let deadline = props.lifetime.map(|l| now + l);
        c.sendq.push_back(OutMsg {
            id,
            refs,
            bytes,
            props,
            deadline,
        });
        if let Some(at) = deadline {
            self.schedule(at, Timer::Expiry { conn, msg: id });
        }
    }

    fn honors_lifetime(&self, conn: ConnId) -> bool {
        self.conns
            .get(&conn)
            .and_then(|c| c.protocol)
            .is_some_and(ProtocolId::honors_lifetime)
    }

    /// Hands queued messages to the protocol until it pushes back.
    fn flush(&mut self, conn: ConnId) {
        let now = self.now();
        let honors = self.honors_lifetime(conn);
        loop {
            let Some(c) = self.conns.get_mut(&conn) else { return };
            if c.blocked || !matches!(c.state, ConnectionState::Established | ConnectionState::Closing) {
                return;
            }
            let path = c.path;
            let Some(msg) = c.sendq.pop_front() else { break };
            if honors && msg.deadline.is_some_and(|d| d <= now) {
                for r in msg.refs {
                    self.emit(conn, Event::Expired(r));
                }
                continue;
            }
            let opts = MessageOptions {
                ordered: msg.props.ordered,
                reliable: msg.props.reliable,
            };
            let result = match path {
                Path::Stream(carrier) | Path::Message(carrier) => self.net.send(carrier, &msg.bytes, opts),
                Path::Datagram { carrier, peer, .. } => {
                    if msg.bytes.len() > MAX_DATAGRAM_PAYLOAD {
                        Err(Error::MessageTooLarge {
                            size: msg.bytes.len(),
                            max: MAX_DATAGRAM_PAYLOAD,
                        })
                    } else {
                        self.net
                            .send_to(carrier, peer, &msg.bytes)
                            .map(|_| SendStatus::Accepted)
                    }
                }
                Path::Mux { assoc, stream } => {
                    let mut out = Vec::new();
                    match self.muxes.get_mut(&assoc) {
                        Some(m) => m
                            .assoc
                            .send_message(stream, &msg.bytes, &mut out)
                            .and_then(|_| self.mux_write(assoc, &out))
                            .map(|_| SendStatus::Accepted),
                        None => Err(Error::AssociationClosed),
                    }
                }
                Path::None => Err(Error::NotEstablished),
            };
            match result {
                Ok(SendStatus::Accepted) => {
                    for r in msg.refs {
                        self.emit(conn, Event::Sent(r));
                    }
                }
                Ok(SendStatus::WouldBlock) => {
                    let c = self.conns.get_mut(&conn).unwrap();
                    c.sendq.push_front(msg);
                    c.blocked = true;
                    return;
                }
                Err(e) => {
                    for r in msg.refs {
                        self.emit(conn, Event::SendError(r, e.to_string()));
                    }
                }
            }
        }
        if self
            .conns
            .get(&conn)
            .is_some_and(|c| c.state == ConnectionState::Closing)
        {
            self.finish_close(conn);
        }
    }

    fn expire(&mut self, conn: ConnId, msg: u64) {
        if !self.honors_lifetime(conn) {
            return;
        }
        let Some(c) = self.conns.get_mut(&conn) else { return };
        let Some(pos) = c.sendq.iter().position(|m| m.id == msg) else {
            return;
        };
        let m = c.sendq.remove(pos).unwrap();
        for r in m.refs {
            self.emit(conn, Event::Expired(r));
        }
    }

    fn conn_inbound(&mut self, conn: ConnId, bytes: &[u8], message: bool) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        if c.state == ConnectionState::Closed {
            return;
        }
        let ctx = MessageContext {
            props: MessageProperties::default(),
            remote: c.remote,
        };
        if c.framers.is_empty() {
            c.inbox.push_back(Message {
                data: bytes.to_vec(),
                context: ctx,
                is_end: true,
            });
        } else {
            let deliveries = match c.framers.push_inbound(bytes, message, &ctx) {
                Ok(d) => d,
                Err(e) => {
                    self.conn_failed(conn, e.to_string());
                    self.abort_path(conn);
                    return;
                }
            };
            for d in deliveries {
                if c.assembling.len() + d.data.len() > MAX_REASSEMBLY {
                    self.conn_failed(conn, Error::ReassemblyOverflow(MAX_REASSEMBLY).to_string());
                    self.abort_path(conn);
                    return;
                }
                c.assembling.extend_from_slice(&d.data);
                if d.is_end {
                    c.inbox.push_back(Message {
                        data: std::mem::take(&mut c.assembling),
                        context: d.ctx,
                        is_end: true,
                    });
                }
            }
        }
        self.match_receives(conn);
    }

    pub(crate) fn receive(&mut self, conn: ConnId, handler: ReceiveHandler) -> Result<()> {
        let c = self.conns.get_mut(&conn).ok_or(Error::NotEstablished)?;
        if c.state == ConnectionState::Closed {
            return Err(Error::NotEstablished);
        }
        c.recv_requests.push_back(handler);
        self.match_receives(conn);
        Ok(())
    }

    fn match_receives(&mut self, conn: ConnId) {
        let now = self.now();
        let Some(c) = self.conns.get_mut(&conn) else { return };
        while !c.recv_requests.is_empty() && !c.inbox.is_empty() {
            let handler = c.recv_requests.pop_front().unwrap();
            let msg = c.inbox.pop_front().unwrap();
            let record = TraceRecord {
                at: now,
                conn,
                event: Event::Received { len: msg.data.len() },
            };
            if self.verbose {
                eprintln!("{record}");
            }
            self.trace.push(record);
            self.pending.push_back(Pending::Received { conn, handler, msg });
        }
    }

    // ---- teardown ------------------------------------------------------

    fn drop_queued(&mut self, conn: ConnId) -> Vec<MessageRef> {
        let Some(c) = self.conns.get_mut(&conn) else {
            return Vec::new();
        };
        let mut refs: Vec<MessageRef> = c.sendq.drain(..).flat_map(|m| m.refs).collect();
        if let Some((_, partial)) = c.partial.take() {
            refs.extend(partial);
        }
        refs
    }

    pub(crate) fn close(&mut self, conn: ConnId) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        match c.state {
            ConnectionState::Closed | ConnectionState::Closing => {}
            ConnectionState::Establishing => self.abort(conn),
            ConnectionState::Established => {
                c.state = ConnectionState::Closing;
                self.flush(conn);
            }
        }
    }

    /// Closes the path after the send queue drained.
    fn finish_close(&mut self, conn: ConnId) {
        let dropped = self.drop_queued(conn);
        for r in dropped {
            self.emit(conn, Event::SendError(r, "connection closed".into()));
        }
        self.release_path(conn, CloseMode::Graceful);
        self.mark_closed(conn);
        self.emit(conn, Event::Closed);
    }

    pub(crate) fn abort(&mut self, conn: ConnId) {
        let Some(c) = self.conns.get(&conn) else { return };
        if c.state == ConnectionState::Closed {
            return;
        }
        let racing = c.race.as_ref().map(|r| r.attempts.len()).unwrap_or(0);
        for i in 0..racing {
            self.cancel_attempt(conn, i, false);
        }
        if let Some(c) = self.conns.get_mut(&conn) {
            c.race = None;
        }
        let dropped = self.drop_queued(conn);
        for r in dropped {
            self.emit(conn, Event::SendError(r, "connection aborted".into()));
        }
        self.release_path(conn, CloseMode::Abort);
        self.mark_closed(conn);
        self.emit(conn, Event::Closed);
    }

    /// Drops a connection without telling the application (listener
    /// stopped before it was handed over).
    fn abort_conn(&mut self, conn: ConnId) {
        self.release_path(conn, CloseMode::Abort);
        self.mark_closed(conn);
    }

    fn abort_path(&mut self, conn: ConnId) {
        self.release_path(conn, CloseMode::Abort);
    }

    fn mark_closed(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.state = ConnectionState::Closed;
            c.framers.stop();
            c.recv_requests.clear();
        }
    }

    fn release_path(&mut self, conn: ConnId, mode: CloseMode) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        let path = std::mem::replace(&mut c.path, Path::None);
        let listener = c.listener;
        match path {
            Path::None => {}
            Path::Stream(carrier) | Path::Message(carrier) => {
                self.owners.remove(&carrier);
                self.net.close(carrier, mode);
            }
            Path::Datagram { carrier, peer, shared } => {
                if shared {
                    if let Some(l) = listener.and_then(|l| self.listeners.get_mut(&l)) {
                        l.udp_peers.remove(&peer);
                    }
                } else {
                    self.owners.remove(&carrier);
                    self.net.close(carrier, mode);
                }
            }
            Path::Mux { assoc, stream } => {
                let Some(m) = self.muxes.get_mut(&assoc) else { return };
                let mut out = Vec::new();
                match mode {
                    CloseMode::Graceful => m.assoc.close_stream(stream, &mut out),
                    CloseMode::Abort => m.assoc.reset_stream(stream, &mut out),
                }
                m.streams.remove(&stream);
                let _ = self.mux_write(assoc, &out);
                self.mux_maybe_finish(assoc);
            }
        }
    }

    /// The peer closed: both directions end.
    fn peer_closed(&mut self, conn: ConnId) {
        let Some(c) = self.conns.get(&conn) else { return };
        if c.state == ConnectionState::Closed {
            return;
        }
        let dropped = self.drop_queued(conn);
        for r in dropped {
            self.emit(conn, Event::SendError(r, "peer closed the connection".into()));
        }
        self.release_path(conn, CloseMode::Graceful);
        self.mark_closed(conn);
        self.emit(conn, Event::Closed);
    }

    fn conn_failed(&mut self, conn: ConnId, cause: String) {
        let Some(c) = self.conns.get(&conn) else { return };
        if c.state == ConnectionState::Closed {
            return;
        }
        let dropped = self.drop_queued(conn);
        for r in dropped {
            self.emit(conn, Event::SendError(r, cause.clone()));
        }
        self.mark_closed(conn);
        self.emit(conn, Event::ConnectionError(cause));
    }

    // ---- groups --------------------------------------------------------

    pub(crate) fn set_property(&mut self, conn: ConnId, key: &str, value: &str) -> Result<()> {
        let c = self.conns.get(&conn).ok_or(Error::Closed)?;
        if c.state == ConnectionState::Closed {
            return Err(Error::Closed);
        }
        let group = c.group;
        self.groups.get_mut(&group).unwrap().props.set(key, value)?;
        if key == CAPACITY_PROFILE {
            let members = self.groups[&group].members.clone();
            for m in members {
                self.apply_dscp(m);
            }
        }
        Ok(())
    }

    pub(crate) fn clone_conn(&mut self, conn: ConnId, on_error: CloneErrorHandler) -> Result<ConnId> {
        let c = self.conns.get(&conn).ok_or(Error::Closed)?;
        let (group, tp, factories, state, path, protocol, remote) = (
            c.group,
            c.tp.clone(),
            c.factories.clone(),
            c.state,
            c.path,
            c.protocol,
            c.remote,
        );
        let mut fresh = ConnState::new(group, tp, factories);
        fresh.protocol = protocol;
        fresh.remote = remote;
        let id = self.add_conn(group, fresh);
        if state != ConnectionState::Established {
            self.conns.get_mut(&id).unwrap().state = ConnectionState::Closed;
            self.clone_error(id, Some(on_error), "connection is not established".into());
            return Ok(id);
        }
        let opened = match path {
            Path::Mux { assoc, .. } => {
                let mut out = Vec::new();
                let m = self.muxes.get_mut(&assoc);
                match m.map(|m| m.assoc.open_stream(&mut out)) {
                    Some(Ok(stream)) => {
                        self.muxes.get_mut(&assoc).unwrap().streams.insert(stream, id);
                        let _ = self.mux_write(assoc, &out);
                        Some(Ok(Path::Mux { assoc, stream }))
                    }
                    Some(Err(e)) => Some(Err(e)),
                    None => Some(Err(Error::AssociationClosed)),
                }
            }
            Path::Message(carrier) => Some(self.net.open_sibling(carrier).map(|sib| {
                self.owners.insert(sib, Owner::Conn(id));
                Path::Message(sib)
            })),
            _ => None,
        };
        match opened {
            Some(Ok(path)) => {
                self.conns.get_mut(&id).unwrap().path = path;
                self.become_established(id, true);
            }
            Some(Err(e)) => {
                self.conns.get_mut(&id).unwrap().state = ConnectionState::Closed;
                self.clone_error(id, Some(on_error), e.to_string());
            }
            None => {
                let (Some(protocol), Some(remote)) = (protocol, remote) else {
                    self.conns.get_mut(&id).unwrap().state = ConnectionState::Closed;
                    self.clone_error(id, Some(on_error), "no peer to clone towards".into());
                    return Ok(id);
                };
                self.conns.get_mut(&id).unwrap().clone_error = Some(on_error);
                let candidate = CandidateStack {
                    protocol,
                    remote,
                    interface: None,
                    score: 0,
                    rank: 0,
                };
                self.start_race(id, vec![candidate]);
            }
        }
        Ok(id)
    }

    // ---- network events ------------------------------------------------

    fn on_net(&mut self, ev: NetEvent) {
        match ev {
            NetEvent::Connected(c) => {
                if let Some(Owner::Attempt { conn, idx }) = self.owners.get(&c).copied() {
                    self.attempt_connected(conn, idx);
                }
            }
            NetEvent::ConnectFailed(c, cause) => {
                if let Some(Owner::Attempt { conn, idx }) = self.owners.remove(&c) {
                    if let Some(a) = self.race_mut(conn).and_then(|r| r.attempts.get_mut(idx)) {
                        a.carrier = None;
                    }
                    self.record_attempt_failure(conn, idx, &cause);
                    let now = self.now();
                    let actions = self
                        .race_mut(conn)
                        .map(|r| r.race.failed(idx, cause, now))
                        .unwrap_or_default();
                    self.apply_race(conn, actions, false);
                }
            }
            NetEvent::Accepted {
                acceptor,
                carrier,
                peer,
                sibling_of,
            } => self.on_accepted(acceptor, carrier, peer, sibling_of),
            NetEvent::Data(c, bytes) => match self.owners.get(&c).copied() {
                Some(Owner::Attempt { conn, idx }) => self.attempt_data(conn, idx, bytes),
                Some(Owner::Conn(conn)) => {
                    let message = !matches!(self.conns.get(&conn).map(|c| c.path), Some(Path::Stream(_)));
                    self.conn_inbound(conn, &bytes, message);
                }
                Some(Owner::Mux(aid)) => self.mux_inbound(aid, &bytes),
                Some(Owner::Sniff) => self.sniff_data(c, &bytes),
                _ => {}
            },
            NetEvent::Datagram { carrier, from, data } => match self.owners.get(&carrier).copied() {
                Some(Owner::Conn(conn)) => {
                    if self.conns.get(&conn).and_then(|c| c.remote) == Some(from) {
                        self.conn_inbound(conn, &data, true);
                    }
                }
                Some(Owner::UdpListener(l)) => self.udp_listener_datagram(l, carrier, from, data),
                _ => {}
            },
            NetEvent::Writable(c) => {
                if let Some(Owner::Conn(conn)) = self.owners.get(&c).copied() {
                    if let Some(cs) = self.conns.get_mut(&conn) {
                        cs.blocked = false;
                    }
                    self.flush(conn);
                }
            }
            NetEvent::PeerClosed(c) | NetEvent::PeerReset(c) => {
                let reset = matches!(ev, NetEvent::PeerReset(_));
                match self.owners.get(&c).copied() {
                    Some(Owner::Attempt { conn, idx }) => {
                        let cause = if reset {
                            "handshake refused"
                        } else {
                            "closed during handshake"
                        };
                        self.attempt_failed(conn, idx, cause);
                    }
                    Some(Owner::Conn(conn)) => {
                        if reset {
                            self.owners.remove(&c);
                            self.release_path(conn, CloseMode::Abort);
                            self.conn_failed(conn, "connection reset by peer".into());
                        } else {
                            self.peer_closed(conn);
                        }
                    }
                    Some(Owner::Mux(aid)) => self.mux_down(aid, reset.then(|| "association reset by peer".to_owned())),
                    Some(Owner::Sniff) => {
                        let has_data = self.sniffs.get(&c).is_some_and(|s| !s.buf.is_empty());
                        if !reset && has_data {
                            if let Some(conn) = self.accept_byte_stream(c) {
                                self.peer_closed(conn);
                            }
                        } else {
                            self.sniffs.remove(&c);
                            self.owners.remove(&c);
                            self.net.close(c, CloseMode::Abort);
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}

/// The unspecified address of `remote`'s family, port 0.
fn unspecified(remote: SocketAddr) -> SocketAddr {
    let ip = match remote.ip() {
        IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
        IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
    };
    SocketAddr::new(ip, 0)
}
