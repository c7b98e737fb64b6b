use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cc::{CongestionController, MSS};
use super::link::{LinkConfig, SimLink, Transmit};
use crate::error::{Error, Result};
use crate::net::{AcceptorId, CarrierId, CarrierKind, CloseMode, MessageOptions, NetEvent, Network, SendStatus};

/// IP plus transport header bytes added to every segment.
pub const HEADER_BYTES: u32 = 52;
pub const UDP_HEADER_BYTES: u32 = 28;
/// Unsent bytes a message-carrier stream buffers before pushing back.
pub const SEND_BUFFER: usize = 256 * 1024;
const SYN_TIMEOUT: Duration = Duration::from_secs(1);
const SYN_RETRIES: u32 = 3;
const INITIAL_RTO: Duration = Duration::from_secs(1);
const MIN_RTO: Duration = Duration::from_millis(10);
const MAX_RTO: Duration = Duration::from_secs(60);
/// A segment is lost once a segment this many sequence numbers later is acked.
const DUP_THRESHOLD: u64 = 3;
const EPHEMERAL_START: u16 = 49152;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Syn,
    SynAck,
    Rst,
    Data,
    Control,
    Ack,
    Datagram,
}

/// One packet handed to a link, whether or not it arrived.
#[derive(Debug, Clone)]
pub struct PacketRecord {
    pub sent_at: Duration,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub size: u32,
    pub dscp: u8,
    pub kind: PacketKind,
    pub seq: Option<u64>,
    pub retransmission: bool,
    /// Datagram payloads only.
    pub payload: Option<Vec<u8>>,
    /// `None` when the packet was dropped.
    pub arrival: Option<Duration>,
}

/// Deterministic losses on top of the links' random loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropRule {
    /// Drops the first transmission of the `n`-th (1-based) data segment
    /// sent by host `src`.
    NthDataSegment { src: IpAddr, n: usize },
}

#[derive(Debug, Clone)]
enum Seg {
    Data {
        stream: u32,
        msg: u64,
        ord: Option<u64>,
        offset: u32,
        total: u32,
        reliable: bool,
        bytes: Vec<u8>,
    },
    Open {
        stream: u32,
    },
    Fin {
        stream: u32,
        msgs: u64,
    },
    Reset {
        stream: u32,
    },
    Abandon {
        stream: u32,
        msg: u64,
        ord: Option<u64>,
    },
}

impl Seg {
    fn payload_len(&self) -> u32 {
        match self {
            Seg::Data { bytes, .. } => bytes.len() as u32,
            _ => 0,
        }
    }

    fn is_data(&self) -> bool {
        matches!(self, Seg::Data { .. })
    }
}

#[derive(Debug)]
enum Body {
    Syn {
        conn: u64,
        kind: CarrierKind,
    },
    SynAck {
        conn: u64,
    },
    Rst {
        conn: u64,
        to_end: usize,
    },
    Segment {
        conn: u64,
        to_end: usize,
        seq: u64,
        seg: Seg,
    },
    Ack {
        conn: u64,
        to_end: usize,
        seq: u64,
    },
    Datagram {
        data: Vec<u8>,
    },
}

#[derive(Debug)]
struct Packet {
    src: SocketAddr,
    dst: SocketAddr,
    body: Body,
}

#[derive(Debug)]
enum SimEv {
    Arrive(Packet),
    SynTimer { conn: u64, gen: u64 },
    Rto { conn: u64, end: usize, gen: u64 },
}

#[derive(Debug)]
struct Scheduled {
    at: Duration,
    order: u64,
    ev: SimEv,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

#[derive(Debug)]
struct Inflight {
    seg: Seg,
    sent_at: Duration,
    retransmitted: bool,
    lost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FinState {
    None,
    Pending,
    Sent,
}

#[derive(Debug)]
struct TxMsg {
    msg: u64,
    ord: Option<u64>,
    reliable: bool,
    bytes: Vec<u8>,
    sent: usize,
}

#[derive(Debug)]
struct TxStream {
    queue: VecDeque<TxMsg>,
    queued_bytes: usize,
    next_msg: u64,
    next_ord: u64,
    fin: FinState,
    want_writable: bool,
}

impl TxStream {
    fn new() -> Self {
        TxStream {
            queue: VecDeque::new(),
            queued_bytes: 0,
            next_msg: 0,
            next_ord: 0,
            fin: FinState::None,
            want_writable: false,
        }
    }
}

#[derive(Debug)]
struct Sender {
    cc: CongestionController,
    next_seq: u64,
    inflight: BTreeMap<u64, Inflight>,
    retx: VecDeque<u64>,
    ctrl: VecDeque<Seg>,
    streams: BTreeMap<u32, TxStream>,
    rr_next: u32,
    srtt: Option<Duration>,
    backoff: u32,
    recovery_point: u64,
    highest_acked: Option<u64>,
    rto_gen: u64,
    abandoned: HashSet<(u32, u64)>,
}

impl Sender {
    fn new() -> Self {
        Sender {
            cc: CongestionController::default(),
            next_seq: 0,
            inflight: BTreeMap::new(),
            retx: VecDeque::new(),
            ctrl: VecDeque::new(),
            streams: BTreeMap::new(),
            rr_next: 0,
            srtt: None,
            backoff: 0,
            recovery_point: 0,
            highest_acked: None,
            rto_gen: 0,
            abandoned: HashSet::new(),
        }
    }

    fn outstanding(&self) -> usize {
        self.inflight.values().filter(|i| !i.lost).count()
    }

    fn rto(&self) -> Duration {
        let base = match self.srtt {
            Some(srtt) => (srtt * 2).max(MIN_RTO),
            None => INITIAL_RTO,
        };
        base.saturating_mul(1 << self.backoff.min(16)).min(MAX_RTO)
    }

    fn sample_rtt(&mut self, sample: Duration) {
        self.srtt = Some(match self.srtt {
            None => sample,
            Some(srtt) => (srtt * 7 + sample) / 8,
        });
    }

    fn mark_lost(&mut self, seq: u64) {
        let Some(inf) = self.inflight.get_mut(&seq) else {
            return;
        };
        if inf.lost {
            return;
        }
        inf.lost = true;
        if seq >= self.recovery_point {
            self.cc.on_loss();
            self.recovery_point = self.next_seq;
        }
        match &inf.seg {
            Seg::Data {
                stream,
                msg,
                ord,
                reliable: false,
                ..
            } => {
                let (stream, msg, ord) = (*stream, *msg, *ord);
                self.inflight.remove(&seq);
                if self.abandoned.insert((stream, msg)) {
                    if let Some(tx) = self.streams.get_mut(&stream) {
                        if let Some(pos) = tx.queue.iter().position(|m| m.msg == msg) {
                            let m = tx.queue.remove(pos).unwrap();
                            tx.queued_bytes -= m.bytes.len() - m.sent;
                        }
                    }
                    self.ctrl.push_back(Seg::Abandon { stream, msg, ord });
                }
            }
            _ => self.retx.push_back(seq),
        }
    }

    /// Next fresh segment in stream mode: up to one MSS of the byte stream,
    /// then the FIN.
    fn next_stream_segment(&mut self) -> Option<Seg> {
        let tx = self.streams.get_mut(&0)?;
        if tx.queue.is_empty() {
            if tx.fin == FinState::Pending {
                tx.fin = FinState::Sent;
                return Some(Seg::Fin { stream: 0, msgs: 0 });
            }
            return None;
        }
        let mut bytes = Vec::with_capacity(MSS as usize);
        while bytes.len() < MSS as usize {
            let Some(head) = tx.queue.front_mut() else { break };
            let take = (MSS as usize - bytes.len()).min(head.bytes.len() - head.sent);
            bytes.extend_from_slice(&head.bytes[head.sent..head.sent + take]);
            head.sent += take;
            tx.queued_bytes -= take;
            if head.sent == head.bytes.len() {
                tx.queue.pop_front();
            }
        }
        Some(Seg::Data {
            stream: 0,
            msg: 0,
            ord: None,
            offset: 0,
            total: 0,
            reliable: true,
            bytes,
        })
    }

    /// Next fresh segment in message mode: one fragment of the head message
    /// of the next stream in round-robin order, else a pending FIN.
    fn next_message_segment(&mut self) -> Option<Seg> {
        let ids: Vec<u32> = self
            .streams
            .range(self.rr_next..)
            .chain(self.streams.range(..self.rr_next))
            .filter(|(_, s)| !s.queue.is_empty())
            .map(|(&id, _)| id)
            .collect();
        if let Some(&id) = ids.first() {
            let tx = self.streams.get_mut(&id).unwrap();
            let head = tx.queue.front_mut().unwrap();
            let take = (MSS as usize).min(head.bytes.len() - head.sent);
            let seg = Seg::Data {
                stream: id,
                msg: head.msg,
                ord: head.ord,
                offset: head.sent as u32,
                total: head.bytes.len() as u32,
                reliable: head.reliable,
                bytes: head.bytes[head.sent..head.sent + take].to_vec(),
            };
            head.sent += take;
            tx.queued_bytes -= take;
            if head.sent == head.bytes.len() {
                tx.queue.pop_front();
            }
            self.rr_next = id.wrapping_add(1);
            return Some(seg);
        }
        for (&id, tx) in self.streams.iter_mut() {
            if tx.fin == FinState::Pending && tx.queue.is_empty() {
                tx.fin = FinState::Sent;
                return Some(Seg::Fin {
                    stream: id,
                    msgs: tx.next_msg,
                });
            }
        }
        None
    }
}

#[derive(Debug)]
struct Partial {
    total: u32,
    got: u32,
    ord: Option<u64>,
    chunks: BTreeMap<u32, Vec<u8>>,
}

#[derive(Debug, Default)]
struct RxStream {
    partial: HashMap<u64, Partial>,
    /// Completed ordered messages waiting for earlier ones; `None` marks an
    /// abandoned message.
    ready: BTreeMap<u64, Option<Vec<u8>>>,
    next_ord: u64,
    finished: u64,
    done_msgs: HashSet<u64>,
    fin_total: Option<u64>,
    closed: bool,
}

#[derive(Debug, Default)]
struct Receiver {
    next_seq: u64,
    ooo: BTreeMap<u64, Seg>,
    seen: BTreeSet<u64>,
    streams: HashMap<u32, RxStream>,
}

impl Receiver {
    /// Records `seq`; returns false for a duplicate.
    fn first_sight(&mut self, seq: u64) -> bool {
        if seq < self.next_seq || self.seen.contains(&seq) {
            return false;
        }
        self.seen.insert(seq);
        while self.seen.remove(&self.next_seq) {
            self.next_seq += 1;
        }
        true
    }
}

#[derive(Debug)]
struct End {
    addr: SocketAddr,
    acceptor: Option<AcceptorId>,
    carriers: BTreeMap<u32, CarrierId>,
    closed_streams: BTreeSet<u32>,
    next_stream: u32,
    dscp: u8,
    alive: bool,
    tx: Sender,
    rx: Receiver,
}

impl End {
    fn new(addr: SocketAddr, first_local_stream: u32) -> Self {
        End {
            addr,
            acceptor: None,
            carriers: BTreeMap::new(),
            closed_streams: BTreeSet::new(),
            next_stream: first_local_stream,
            dscp: 0,
            alive: true,
            tx: Sender::new(),
            rx: Receiver::default(),
        }
    }

    fn carrier(&self, stream: u32) -> Option<CarrierId> {
        if self.closed_streams.contains(&stream) {
            return None;
        }
        self.carriers.get(&stream).copied()
    }
}

#[derive(Debug)]
struct Conn {
    kind: CarrierKind,
    ends: [End; 2],
    accepted: bool,
    connected: bool,
    failed: bool,
    syn_sent_at: Duration,
    syn_tries: u32,
    syn_gen: u64,
}

#[derive(Debug, Clone, Copy)]
enum CarrierRec {
    Conn { conn: u64, end: usize, stream: u32 },
    Datagram { addr: SocketAddr },
}

#[derive(Debug, Default)]
struct Host {
    outbox: Vec<NetEvent>,
    next_port: u16,
}

/// The shared state of a simulated network: links, in-flight packets, the
/// virtual clock, and every simulated transport connection.
#[derive(Debug)]
pub struct SimNet {
    now: Duration,
    order: u64,
    events: BinaryHeap<Reverse<Scheduled>>,
    default_link: LinkConfig,
    links: HashMap<(IpAddr, IpAddr), SimLink>,
    rng: ChaCha8Rng,
    hosts: HashMap<IpAddr, Host>,
    carriers: HashMap<CarrierId, CarrierRec>,
    carrier_host: HashMap<CarrierId, IpAddr>,
    acceptors: HashMap<AcceptorId, (SocketAddr, CarrierKind)>,
    listen_index: HashMap<(SocketAddr, CarrierKind), AcceptorId>,
    datagram_index: HashMap<SocketAddr, CarrierId>,
    conns: HashMap<u64, Conn>,
    drop_rules: Vec<DropRule>,
    data_sent: HashMap<IpAddr, usize>,
    log: Vec<PacketRecord>,
    next_id: u64,
}

impl SimNet {
    pub fn new(seed: u64, default_link: LinkConfig) -> Self {
        SimNet {
            now: Duration::ZERO,
            order: 0,
            events: BinaryHeap::new(),
            default_link,
            links: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            hosts: HashMap::new(),
            carriers: HashMap::new(),
            carrier_host: HashMap::new(),
            acceptors: HashMap::new(),
            listen_index: HashMap::new(),
            datagram_index: HashMap::new(),
            conns: HashMap::new(),
            drop_rules: Vec::new(),
            data_sent: HashMap::new(),
            log: Vec::new(),
            next_id: 1,
        }
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn add_host(&mut self, ip: IpAddr) {
        self.hosts.entry(ip).or_insert_with(|| Host {
            outbox: Vec::new(),
            next_port: EPHEMERAL_START,
        });
    }

    pub fn has_host(&self, ip: IpAddr) -> bool {
        self.hosts.contains_key(&ip)
    }

    pub fn hosts(&self) -> impl Iterator<Item = IpAddr> + '_ {
        self.hosts.keys().copied()
    }

    /// Configures the `src -> dst` direction.
    pub fn set_link(&mut self, src: IpAddr, dst: IpAddr, cfg: LinkConfig) {
        self.links.insert((src, dst), SimLink::new(cfg));
    }

    pub fn add_drop_rule(&mut self, rule: DropRule) {
        self.drop_rules.push(rule);
    }

    pub fn packet_log(&self) -> &[PacketRecord] {
        &self.log
    }

    pub fn take_outbox(&mut self, ip: IpAddr) -> Vec<NetEvent> {
        self.hosts
            .get_mut(&ip)
            .map(|h| std::mem::take(&mut h.outbox))
            .unwrap_or_default()
    }

    pub fn next_event_time(&self) -> Option<Duration> {
        self.events.peek().map(|Reverse(s)| s.at)
    }

    /// Advances the clock to the next scheduled instant and processes every
    /// event due then. Returns the new time.
    pub fn step(&mut self) -> Option<Duration> {
        let at = self.next_event_time()?;
        self.now = at;
        while self.events.peek().is_some_and(|Reverse(s)| s.at == at) {
            let Reverse(s) = self.events.pop().unwrap();
            self.handle(s.ev);
        }
        Some(at)
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, t: Duration) {
        debug_assert!(self.next_event_time().is_none_or(|n| n >= t));
        self.now = self.now.max(t);
    }

    pub fn cwnd_of(&self, carrier: CarrierId) -> Option<u32> {
        match self.carriers.get(&carrier)? {
            CarrierRec::Conn { conn, end, .. } => Some(self.conns.get(conn)?.ends[*end].tx.cc.cwnd()),
            CarrierRec::Datagram { .. } => None,
        }
    }

    /// Whether two carriers share one simulated association.
    pub fn same_association(&self, a: CarrierId, b: CarrierId) -> bool {
        match (self.carriers.get(&a), self.carriers.get(&b)) {
            (Some(CarrierRec::Conn { conn: x, end: e1, .. }), Some(CarrierRec::Conn { conn: y, end: e2, .. })) => {
                x == y && e1 == e2
            }
            _ => false,
        }
    }

    fn id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn schedule(&mut self, at: Duration, ev: SimEv) {
        self.order += 1;
        self.events.push(Reverse(Scheduled {
            at,
            order: self.order,
            ev,
        }));
    }

    fn push_event(&mut self, ip: IpAddr, ev: NetEvent) {
        if let Some(h) = self.hosts.get_mut(&ip) {
            h.outbox.push(ev);
        }
    }

    fn ephemeral(&mut self, ip: IpAddr) -> Result<SocketAddr> {
        let host = self
            .hosts
            .get_mut(&ip)
            .ok_or(Error::Unsupported("unknown simulated host"))?;
        let port = host.next_port;
        host.next_port = host.next_port.checked_add(1).unwrap_or(EPHEMERAL_START);
        Ok(SocketAddr::new(ip, port))
    }

    fn new_carrier(&mut self, ip: IpAddr, rec: CarrierRec) -> CarrierId {
        let id = CarrierId(self.id());
        self.carriers.insert(id, rec);
        self.carrier_host.insert(id, ip);
        id
    }

    fn emit(&mut self, src: SocketAddr, dst: SocketAddr, dscp: u8, body: Body, retransmission: bool) {
        let (size, kind, seq, payload) = match &body {
            Body::Syn { .. } => (HEADER_BYTES, PacketKind::Syn, None, None),
            Body::SynAck { .. } => (HEADER_BYTES, PacketKind::SynAck, None, None),
            Body::Rst { .. } => (HEADER_BYTES, PacketKind::Rst, None, None),
            Body::Ack { seq, .. } => (HEADER_BYTES, PacketKind::Ack, Some(*seq), None),
            Body::Segment { seq, seg, .. } => (
                HEADER_BYTES + seg.payload_len(),
                if seg.is_data() {
                    PacketKind::Data
                } else {
                    PacketKind::Control
                },
                Some(*seq),
                None,
            ),
            Body::Datagram { data } => (
                UDP_HEADER_BYTES + data.len() as u32,
                PacketKind::Datagram,
                None,
                Some(data.clone()),
            ),
        };
        let mut forced_drop = false;
        if kind == PacketKind::Data && !retransmission {
            let n = self.data_sent.entry(src.ip()).or_default();
            *n += 1;
            let n = *n;
            forced_drop = self
                .drop_rules
                .iter()
                .any(|r| matches!(*r, DropRule::NthDataSegment { src: s, n: k } if s == src.ip() && k == n));
        }
        let now = self.now;
        let arrival = if forced_drop {
            None
        } else {
            let default = self.default_link;
            let link = self
                .links
                .entry((src.ip(), dst.ip()))
                .or_insert_with(|| SimLink::new(default));
            match link.transmit(size, now, &mut self.rng) {
                Transmit::Arrives(t) => Some(t),
                Transmit::Dropped(_) => None,
            }
        };
        self.log.push(PacketRecord {
            sent_at: now,
            src,
            dst,
            size,
            dscp,
            kind,
            seq,
            retransmission,
            payload,
            arrival,
        });
        if let Some(t) = arrival {
            self.schedule(t, SimEv::Arrive(Packet { src, dst, body }));
        }
    }

    /// Sends whatever the congestion window allows from one end and
    /// re-arms its retransmission timer.
    fn pump(&mut self, conn_id: u64, end: usize) {
        let now = self.now;
        let mut out = Vec::new();
        let mut writable = Vec::new();
        let rto_at;
        {
            let Some(conn) = self.conns.get_mut(&conn_id) else {
                return;
            };
            let kind = conn.kind;
            let (src, dst) = (conn.ends[end].addr, conn.ends[1 - end].addr);
            let e = &mut conn.ends[end];
            if !e.alive {
                return;
            }
            let dscp = e.dscp;
            let tx = &mut e.tx;
            while tx.outstanding() < tx.cc.cwnd() as usize {
                if let Some(seq) = tx.retx.pop_front() {
                    let Some(inf) = tx.inflight.get_mut(&seq) else { continue };
                    if !inf.lost {
                        continue;
                    }
                    inf.lost = false;
                    inf.retransmitted = true;
                    inf.sent_at = now;
                    out.push((seq, inf.seg.clone(), true));
                    continue;
                }
                let seg = match tx.ctrl.pop_front() {
                    Some(seg) => seg,
                    None => match kind {
                        CarrierKind::Stream => match tx.next_stream_segment() {
                            Some(seg) => seg,
                            None => break,
                        },
                        CarrierKind::Message => match tx.next_message_segment() {
                            Some(seg) => seg,
                            None => break,
                        },
                    },
                };
                let seq = tx.next_seq;
                tx.next_seq += 1;
                tx.inflight.insert(
                    seq,
                    Inflight {
                        seg: seg.clone(),
                        sent_at: now,
                        retransmitted: false,
                        lost: false,
                    },
                );
                out.push((seq, seg, false));
            }
            for (&id, s) in tx.streams.iter_mut() {
                if s.want_writable && s.queued_bytes < SEND_BUFFER {
                    s.want_writable = false;
                    if let Some(c) = e.carriers.get(&id) {
                        writable.push(*c);
                    }
                }
            }
            let tx = &mut e.tx;
            tx.rto_gen += 1;
            rto_at = tx
                .inflight
                .values()
                .filter(|i| !i.lost)
                .map(|i| i.sent_at)
                .min()
                .map(|t| (t + tx.rto(), tx.rto_gen));
            for (seq, seg, retx) in out {
                let body = Body::Segment {
                    conn: conn_id,
                    to_end: 1 - end,
                    seq,
                    seg,
                };
                self.emit(src, dst, dscp, body, retx);
            }
            if let Some(ip) = self.carrier_host_of_end(conn_id, end) {
                for c in writable {
                    self.push_event(ip, NetEvent::Writable(c));
                }
            }
        }
        if let Some((at, gen)) = rto_at {
            self.schedule(
                at,
                SimEv::Rto {
                    conn: conn_id,
                    end,
                    gen,
                },
            );
        }
    }

    fn carrier_host_of_end(&self, conn: u64, end: usize) -> Option<IpAddr> {
        self.conns.get(&conn).map(|c| c.ends[end].addr.ip())
    }

    fn handle(&mut self, ev: SimEv) {
        match ev {
            SimEv::Arrive(p) => self.arrive(p),
            SimEv::SynTimer { conn, gen } => self.syn_timer(conn, gen),
            SimEv::Rto { conn, end, gen } => self.rto(conn, end, gen),
        }
    }

    fn syn_timer(&mut self, conn_id: u64, gen: u64) {
        let Some(conn) = self.conns.get_mut(&conn_id) else {
            return;
        };
        if conn.connected || conn.failed || conn.syn_gen != gen {
            return;
        }
        let carrier = conn.ends[0].carriers[&0];
        let ip = conn.ends[0].addr.ip();
        if conn.syn_tries >= SYN_RETRIES {
            conn.failed = true;
            conn.ends[0].alive = false;
            self.push_event(ip, NetEvent::ConnectFailed(carrier, "connection timed out".into()));
            return;
        }
        conn.syn_tries += 1;
        conn.syn_gen += 1;
        let (gen, kind, src, dst) = (conn.syn_gen, conn.kind, conn.ends[0].addr, conn.ends[1].addr);
        self.emit(src, dst, 0, Body::Syn { conn: conn_id, kind }, true);
        let at = self.now + SYN_TIMEOUT;
        self.schedule(at, SimEv::SynTimer { conn: conn_id, gen });
    }

    fn rto(&mut self, conn_id: u64, end: usize, gen: u64) {
        let now = self.now;
        {
            let Some(conn) = self.conns.get_mut(&conn_id) else {
                return;
            };
            let tx = &mut conn.ends[end].tx;
            if tx.rto_gen != gen || !conn.ends[end].alive {
                return;
            }
            let rto = tx.rto();
            let expired: Vec<u64> = tx
                .inflight
                .iter()
                .filter(|(_, i)| !i.lost && i.sent_at + rto <= now)
                .map(|(&s, _)| s)
                .collect();
            for seq in expired {
                tx.mark_lost(seq);
            }
            tx.backoff += 1;
        }
        self.pump(conn_id, end);
    }

    fn arrive(&mut self, p: Packet) {
        match p.body {
            Body::Datagram { data } => {
                if let Some(&carrier) = self.datagram_index.get(&p.dst) {
                    self.push_event(
                        p.dst.ip(),
                        NetEvent::Datagram {
                            carrier,
                            from: p.src,
                            data,
                        },
                    );
                }
            }
            Body::Syn { conn, kind } => self.on_syn(conn, kind, p.src, p.dst),
            Body::SynAck { conn } => self.on_synack(conn),
            Body::Rst { conn, to_end } => self.on_rst(conn, to_end),
            Body::Ack { conn, to_end, seq } => self.on_ack(conn, to_end, seq),
            Body::Segment { conn, to_end, seq, seg } => self.on_segment(conn, to_end, seq, seg),
        }
    }

    fn on_syn(&mut self, conn_id: u64, kind: CarrierKind, src: SocketAddr, dst: SocketAddr) {
        let Some(acceptor) = self.listen_index.get(&(dst, kind)).copied() else {
            self.emit(
                dst,
                src,
                0,
                Body::Rst {
                    conn: conn_id,
                    to_end: 0,
                },
                false,
            );
            return;
        };
        let Some(conn) = self.conns.get_mut(&conn_id) else {
            return;
        };
        if !conn.accepted {
            conn.accepted = true;
            conn.ends[1].acceptor = Some(acceptor);
            let carrier = self.new_carrier(
                dst.ip(),
                CarrierRec::Conn {
                    conn: conn_id,
                    end: 1,
                    stream: 0,
                },
            );
            let conn = self.conns.get_mut(&conn_id).unwrap();
            conn.ends[1].carriers.insert(0, carrier);
            conn.ends[1].tx.streams.insert(0, TxStream::new());
            self.push_event(
                dst.ip(),
                NetEvent::Accepted {
                    acceptor: Some(acceptor),
                    carrier,
                    peer: src,
                    sibling_of: None,
                },
            );
        }
        self.emit(dst, src, 0, Body::SynAck { conn: conn_id }, false);
    }

    fn on_synack(&mut self, conn_id: u64) {
        let now = self.now;
        let Some(conn) = self.conns.get_mut(&conn_id) else {
            return;
        };
        if conn.connected || conn.failed {
            return;
        }
        conn.connected = true;
        if !conn.ends[0].alive {
            let (src, dst) = (conn.ends[0].addr, conn.ends[1].addr);
            self.emit(
                src,
                dst,
                0,
                Body::Rst {
                    conn: conn_id,
                    to_end: 1,
                },
                false,
            );
            return;
        }
        if conn.syn_tries == 0 {
            conn.ends[0].tx.srtt = Some(now - conn.syn_sent_at);
        }
        let carrier = conn.ends[0].carriers[&0];
        let ip = conn.ends[0].addr.ip();
        self.push_event(ip, NetEvent::Connected(carrier));
        self.pump(conn_id, 0);
    }

    fn on_rst(&mut self, conn_id: u64, to_end: usize) {
        let Some(conn) = self.conns.get_mut(&conn_id) else {
            return;
        };
        let e = &mut conn.ends[to_end];
        if !e.alive {
            return;
        }
        e.alive = false;
        let ip = e.addr.ip();
        let carriers: Vec<CarrierId> = e
            .carriers
            .iter()
            .filter(|(s, _)| !e.closed_streams.contains(s))
            .map(|(_, &c)| c)
            .collect();
        let refused = to_end == 0 && !conn.connected;
        if refused {
            conn.failed = true;
        }
        for c in carriers {
            let ev = if refused {
                NetEvent::ConnectFailed(c, "connection refused".into())
            } else {
                NetEvent::PeerReset(c)
            };
            self.push_event(ip, ev);
        }
    }

    fn on_ack(&mut self, conn_id: u64, end: usize, seq: u64) {
        let now = self.now;
        {
            let Some(conn) = self.conns.get_mut(&conn_id) else {
                return;
            };
            if !conn.ends[end].alive {
                return;
            }
            let tx = &mut conn.ends[end].tx;
            if let Some(inf) = tx.inflight.remove(&seq) {
                if !inf.retransmitted && !inf.lost {
                    tx.sample_rtt(now - inf.sent_at);
                }
                if inf.lost {
                    tx.retx.retain(|&s| s != seq);
                }
                tx.cc.on_ack(1);
                tx.backoff = 0;
            }
            let highest = tx.highest_acked.map_or(seq, |h| h.max(seq));
            tx.highest_acked = Some(highest);
            if highest >= DUP_THRESHOLD {
                let lost: Vec<u64> = tx
                    .inflight
                    .range(..=highest - DUP_THRESHOLD)
                    .filter(|(_, i)| !i.lost && !i.retransmitted)
                    .map(|(&s, _)| s)
                    .collect();
                for s in lost {
                    tx.mark_lost(s);
                }
            }
        }
        self.pump(conn_id, end);
    }

    fn on_segment(&mut self, conn_id: u64, end: usize, seq: u64, seg: Seg) {
        let Some(conn) = self.conns.get(&conn_id) else { return };
        let e = &conn.ends[end];
        if !e.alive {
            return;
        }
        let (src, dst, dscp) = (e.addr, conn.ends[1 - end].addr, e.dscp);
        let kind = conn.kind;
        self.emit(
            src,
            dst,
            dscp,
            Body::Ack {
                conn: conn_id,
                to_end: 1 - end,
                seq,
            },
            false,
        );
        match kind {
            CarrierKind::Stream => self.on_stream_segment(conn_id, end, seq, seg),
            CarrierKind::Message => {
                let conn = self.conns.get_mut(&conn_id).unwrap();
                if conn.ends[end].rx.first_sight(seq) {
                    self.on_message_segment(conn_id, end, seg);
                }
            }
        }
    }

    fn on_stream_segment(&mut self, conn_id: u64, end: usize, seq: u64, seg: Seg) {
        let conn = self.conns.get_mut(&conn_id).unwrap();
        let e = &mut conn.ends[end];
        if seq < e.rx.next_seq {
            return;
        }
        e.rx.ooo.entry(seq).or_insert(seg);
        let mut events = Vec::new();
        let carrier = e.carrier(0);
        while let Some(seg) = e.rx.ooo.remove(&e.rx.next_seq) {
            e.rx.next_seq += 1;
            let Some(c) = carrier else { continue };
            match seg {
                Seg::Data { bytes, .. } => events.push(NetEvent::Data(c, bytes)),
                Seg::Fin { .. } => events.push(NetEvent::PeerClosed(c)),
                _ => {}
            }
        }
        let ip = e.addr.ip();
        for ev in events {
            self.push_event(ip, ev);
        }
    }

    fn ensure_rx_stream(&mut self, conn_id: u64, end: usize, stream: u32) -> Option<CarrierId> {
        let conn = self.conns.get(&conn_id)?;
        let e = &conn.ends[end];
        if e.closed_streams.contains(&stream) {
            return None;
        }
        if let Some(&c) = e.carriers.get(&stream) {
            return Some(c);
        }
        let ip = e.addr.ip();
        let peer = conn.ends[1 - end].addr;
        let acceptor = e.acceptor;
        let sibling = e.carriers.values().next().copied();
        let carrier = self.new_carrier(
            ip,
            CarrierRec::Conn {
                conn: conn_id,
                end,
                stream,
            },
        );
        let e = &mut self.conns.get_mut(&conn_id).unwrap().ends[end];
        e.carriers.insert(stream, carrier);
        e.tx.streams.entry(stream).or_insert_with(TxStream::new);
        self.push_event(
            ip,
            NetEvent::Accepted {
                acceptor,
                carrier,
                peer,
                sibling_of: sibling,
            },
        );
        Some(carrier)
    }

    fn on_message_segment(&mut self, conn_id: u64, end: usize, seg: Seg) {
        let stream = match &seg {
            Seg::Data { stream, .. }
            | Seg::Open { stream }
            | Seg::Fin { stream, .. }
            | Seg::Reset { stream }
            | Seg::Abandon { stream, .. } => *stream,
        };
        let Some(carrier) = self.ensure_rx_stream(conn_id, end, stream) else {
            return;
        };
        let conn = self.conns.get_mut(&conn_id).unwrap();
        let e = &mut conn.ends[end];
        let ip = e.addr.ip();
        let rx = e.rx.streams.entry(stream).or_default();
        if rx.closed {
            return;
        }
        let mut events = Vec::new();
        match seg {
            Seg::Open { .. } => {}
            Seg::Reset { .. } => {
                rx.closed = true;
                events.push(NetEvent::PeerReset(carrier));
            }
            Seg::Fin { msgs, .. } => rx.fin_total = Some(msgs),
            Seg::Abandon { msg, ord, .. } => {
                if rx.done_msgs.insert(msg) {
                    rx.partial.remove(&msg);
                    rx.finished += 1;
                    if let Some(o) = ord {
                        rx.ready.insert(o, None);
                    }
                }
            }
            Seg::Data {
                msg,
                ord,
                offset,
                total,
                bytes,
                ..
            } => {
                if !rx.done_msgs.contains(&msg) {
                    let part = rx.partial.entry(msg).or_insert_with(|| Partial {
                        total,
                        got: 0,
                        ord,
                        chunks: BTreeMap::new(),
                    });
                    if let std::collections::btree_map::Entry::Vacant(v) = part.chunks.entry(offset) {
                        part.got += bytes.len() as u32;
                        v.insert(bytes);
                    }
                    if part.got >= part.total {
                        let part = rx.partial.remove(&msg).unwrap();
                        rx.done_msgs.insert(msg);
                        let data: Vec<u8> = part.chunks.into_values().flatten().collect();
                        match part.ord {
                            None => {
                                rx.finished += 1;
                                events.push(NetEvent::Data(carrier, data));
                            }
                            Some(o) => {
                                rx.ready.insert(o, Some(data));
                            }
                        }
                    }
                }
            }
        }
        while let Some(entry) = rx.ready.remove(&rx.next_ord) {
            rx.next_ord += 1;
            if let Some(data) = entry {
                rx.finished += 1;
                events.push(NetEvent::Data(carrier, data));
            }
        }
        if !rx.closed && rx.fin_total.is_some_and(|t| rx.finished >= t) {
            rx.closed = true;
            events.push(NetEvent::PeerClosed(carrier));
        }
        for ev in events {
            self.push_event(ip, ev);
        }
    }

    // Operations behind the `Network` trait, addressed by host.

    fn connect(&mut self, ip: IpAddr, kind: CarrierKind, remote: SocketAddr) -> Result<CarrierId> {
        let local = self.ephemeral(ip)?;
        let conn_id = self.id();
        let carrier = self.new_carrier(
            ip,
            CarrierRec::Conn {
                conn: conn_id,
                end: 0,
                stream: 0,
            },
        );
        let mut initiator = End::new(local, 2);
        initiator.carriers.insert(0, carrier);
        initiator.tx.streams.insert(0, TxStream::new());
        let acceptor = End::new(remote, 1);
        self.conns.insert(
            conn_id,
            Conn {
                kind,
                ends: [initiator, acceptor],
                accepted: false,
                connected: false,
                failed: false,
                syn_sent_at: self.now,
                syn_tries: 0,
                syn_gen: 0,
            },
        );
        self.emit(local, remote, 0, Body::Syn { conn: conn_id, kind }, false);
        let at = self.now + SYN_TIMEOUT;
        self.schedule(at, SimEv::SynTimer { conn: conn_id, gen: 0 });
        Ok(carrier)
    }

    fn conn_of(&self, carrier: CarrierId) -> Result<(u64, usize, u32)> {
        match self.carriers.get(&carrier) {
            Some(CarrierRec::Conn { conn, end, stream }) => Ok((*conn, *end, *stream)),
            _ => Err(Error::CarrierClosed),
        }
    }

    fn open_sibling(&mut self, carrier: CarrierId) -> Result<CarrierId> {
        let (conn_id, end, _) = self.conn_of(carrier)?;
        let conn = self.conns.get_mut(&conn_id).ok_or(Error::CarrierClosed)?;
        if conn.kind != CarrierKind::Message {
            return Err(Error::Unsupported("sibling streams need a message carrier"));
        }
        let e = &mut conn.ends[end];
        if !e.alive {
            return Err(Error::CarrierClosed);
        }
        let stream = e.next_stream;
        e.next_stream += 2;
        e.tx.streams.insert(stream, TxStream::new());
        e.tx.ctrl.push_back(Seg::Open { stream });
        let ip = e.addr.ip();
        let new = self.new_carrier(
            ip,
            CarrierRec::Conn {
                conn: conn_id,
                end,
                stream,
            },
        );
        self.conns.get_mut(&conn_id).unwrap().ends[end]
            .carriers
            .insert(stream, new);
        self.pump(conn_id, end);
        Ok(new)
    }

    fn listen(&mut self, ip: IpAddr, kind: CarrierKind, local: SocketAddr) -> Result<AcceptorId> {
        let addr = SocketAddr::new(ip, local.port());
        if self.listen_index.contains_key(&(addr, kind)) {
            return Err(std::io::Error::new(std::io::ErrorKind::AddrInUse, format!("{addr} in use")).into());
        }
        let id = AcceptorId(self.id());
        self.listen_index.insert((addr, kind), id);
        self.acceptors.insert(id, (addr, kind));
        Ok(id)
    }

    fn close_acceptor(&mut self, acceptor: AcceptorId) {
        if let Some(key) = self.acceptors.remove(&acceptor) {
            self.listen_index.remove(&key);
        }
    }

    fn bind_datagram(&mut self, ip: IpAddr, local: SocketAddr) -> Result<CarrierId> {
        let addr = if local.port() == 0 {
            self.ephemeral(ip)?
        } else {
            SocketAddr::new(ip, local.port())
        };
        if self.datagram_index.contains_key(&addr) {
            return Err(std::io::Error::new(std::io::ErrorKind::AddrInUse, format!("{addr} in use")).into());
        }
        let id = self.new_carrier(ip, CarrierRec::Datagram { addr });
        self.datagram_index.insert(addr, id);
        Ok(id)
    }

    fn send(&mut self, carrier: CarrierId, data: &[u8], opts: MessageOptions) -> Result<SendStatus> {
        let (conn_id, end, stream) = self.conn_of(carrier)?;
        let conn = self.conns.get_mut(&conn_id).ok_or(Error::CarrierClosed)?;
        let kind = conn.kind;
        let e = &mut conn.ends[end];
        if !e.alive || e.closed_streams.contains(&stream) {
            return Err(Error::CarrierClosed);
        }
        let tx = e.tx.streams.entry(stream).or_insert_with(TxStream::new);
        if tx.fin != FinState::None {
            return Err(Error::CarrierClosed);
        }
        match kind {
            CarrierKind::Stream => {
                if data.is_empty() {
                    return Ok(SendStatus::Accepted);
                }
            }
            CarrierKind::Message => {
                if tx.queued_bytes >= SEND_BUFFER {
                    tx.want_writable = true;
                    return Ok(SendStatus::WouldBlock);
                }
            }
        }
        let msg = tx.next_msg;
        tx.next_msg += 1;
        let ord = (kind == CarrierKind::Message && opts.ordered).then(|| {
            tx.next_ord += 1;
            tx.next_ord - 1
        });
        tx.queued_bytes += data.len();
        tx.queue.push_back(TxMsg {
            msg,
            ord,
            reliable: opts.reliable || kind == CarrierKind::Stream,
            bytes: data.to_vec(),
            sent: 0,
        });
        self.pump(conn_id, end);
        Ok(SendStatus::Accepted)
    }

    fn send_to(&mut self, carrier: CarrierId, to: SocketAddr, data: &[u8]) -> Result<()> {
        let Some(CarrierRec::Datagram { addr }) = self.carriers.get(&carrier).copied() else {
            return Err(Error::CarrierClosed);
        };
        self.emit(addr, to, 0, Body::Datagram { data: data.to_vec() }, false);
        Ok(())
    }

    fn close(&mut self, carrier: CarrierId, mode: CloseMode) {
        match self.carriers.get(&carrier).copied() {
            Some(CarrierRec::Datagram { addr }) => {
                self.datagram_index.remove(&addr);
                self.carriers.remove(&carrier);
            }
            Some(CarrierRec::Conn { conn, end, stream }) => self.close_stream(conn, end, stream, mode),
            None => {}
        }
    }

    fn close_stream(&mut self, conn_id: u64, end: usize, stream: u32, mode: CloseMode) {
        let Some(conn) = self.conns.get_mut(&conn_id) else {
            return;
        };
        let kind = conn.kind;
        let (src, dst) = (conn.ends[end].addr, conn.ends[1 - end].addr);
        let e = &mut conn.ends[end];
        if !e.alive || !e.closed_streams.insert(stream) {
            return;
        }
        match (kind, mode) {
            (CarrierKind::Stream, CloseMode::Abort) => {
                e.alive = false;
                e.tx.inflight.clear();
                e.tx.retx.clear();
                e.tx.streams.clear();
                let dscp = e.dscp;
                let connected = conn.connected;
                if connected || end == 1 {
                    self.emit(
                        src,
                        dst,
                        dscp,
                        Body::Rst {
                            conn: conn_id,
                            to_end: 1 - end,
                        },
                        false,
                    );
                }
                return;
            }
            (CarrierKind::Message, CloseMode::Abort) => {
                if let Some(tx) = e.tx.streams.get_mut(&stream) {
                    tx.queue.clear();
                    tx.queued_bytes = 0;
                    tx.fin = FinState::Sent;
                }
                e.tx.ctrl.push_back(Seg::Reset { stream });
            }
            (_, CloseMode::Graceful) => {
                let tx = e.tx.streams.entry(stream).or_insert_with(TxStream::new);
                if tx.fin == FinState::None {
                    tx.fin = FinState::Pending;
                }
            }
        }
        if !conn.connected && end == 0 {
            // Closed before the handshake finished: nothing to flush.
            conn.failed = true;
            conn.ends[0].alive = false;
            return;
        }
        self.pump(conn_id, end);
    }

    fn set_dscp(&mut self, carrier: CarrierId, dscp: u8) {
        if let Ok((conn, end, _)) = self.conn_of(carrier) {
            if let Some(c) = self.conns.get_mut(&conn) {
                c.ends[end].dscp = dscp & 0x3f;
            }
        }
    }

    fn local_addr(&self, carrier: CarrierId) -> Option<SocketAddr> {
        match self.carriers.get(&carrier)? {
            CarrierRec::Datagram { addr } => Some(*addr),
            CarrierRec::Conn { conn, end, .. } => Some(self.conns.get(conn)?.ends[*end].addr),
        }
    }
}

/// A host's view of a shared [`SimNet`], implementing [`Network`].
#[derive(Debug, Clone)]
pub struct SimHost {
    net: Arc<Mutex<SimNet>>,
    ip: IpAddr,
}

impl SimHost {
    pub fn new(net: Arc<Mutex<SimNet>>, ip: IpAddr) -> Self {
        net.lock().unwrap().add_host(ip);
        SimHost { net, ip }
    }

    pub fn ip(&self) -> IpAddr {
        self.ip
    }

    fn net(&self) -> MutexGuard<'_, SimNet> {
        self.net.lock().expect("simulator lock poisoned")
    }
}

impl Network for SimHost {
    fn now(&self) -> Duration {
        self.net().now()
    }

    fn resolve(&mut self, host: &str, port: u16) -> Result<Vec<SocketAddr>> {
        match host {
            "localhost" => Ok(vec![SocketAddr::new(self.ip, port)]),
            h => h
                .parse::<IpAddr>()
                .map(|ip| vec![SocketAddr::new(ip, port)])
                .map_err(|_| Error::Resolve(h.to_owned())),
        }
    }

    fn connect(&mut self, kind: CarrierKind, remote: SocketAddr) -> Result<CarrierId> {
        let ip = self.ip;
        self.net().connect(ip, kind, remote)
    }

    fn open_sibling(&mut self, carrier: CarrierId) -> Result<CarrierId> {
        self.net().open_sibling(carrier)
    }

    fn listen(&mut self, kind: CarrierKind, local: SocketAddr) -> Result<AcceptorId> {
        let ip = self.ip;
        self.net().listen(ip, kind, local)
    }

    fn close_acceptor(&mut self, acceptor: AcceptorId) {
        self.net().close_acceptor(acceptor)
    }

    fn bind_datagram(&mut self, local: SocketAddr) -> Result<CarrierId> {
        let ip = self.ip;
        self.net().bind_datagram(ip, local)
    }

    fn send(&mut self, carrier: CarrierId, data: &[u8], opts: MessageOptions) -> Result<SendStatus> {
        self.net().send(carrier, data, opts)
    }

    fn send_to(&mut self, carrier: CarrierId, to: SocketAddr, data: &[u8]) -> Result<()> {
        self.net().send_to(carrier, to, data)
    }

    fn close(&mut self, carrier: CarrierId, mode: CloseMode) {
        self.net().close(carrier, mode)
    }

    fn set_dscp(&mut self, carrier: CarrierId, dscp: u8) {
        self.net().set_dscp(carrier, dscp)
    }

    fn local_addr(&self, carrier: CarrierId) -> Option<SocketAddr> {
        self.net().local_addr(carrier)
    }

    fn acceptor_addr(&self, acceptor: AcceptorId) -> Option<SocketAddr> {
        self.net().acceptors.get(&acceptor).map(|(a, _)| *a)
    }

    fn poll(&mut self, _timeout: Option<Duration>) -> Result<Vec<NetEvent>> {
        Err(Error::Unsupported("simulated hosts are driven by their SimWorld"))
    }
}
