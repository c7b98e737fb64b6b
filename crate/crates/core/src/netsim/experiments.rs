//! Head-of-line blocking and flow-completion-time experiments, driven
//! through the public connection API on a [`SimWorld`].

use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{bdp_packets, DropRule, LinkConfig, PacketKind, SimWorld};
use crate::adapters::ProtocolId;
use crate::connection::{Connection, Message};
use crate::error::{Error, Result};
use crate::framer::{Framer, FramerError, FramerSender, MessageContext, ReceiveCursor};
use crate::preconnection::{LocalEndpoint, Preconnection, RemoteEndpoint};
use crate::properties::{MessageProperties, SelectionProperty, TransportProperties};

pub const CLIENT: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1));
pub const SERVER: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2));
pub const PORT: u16 = 5000;

/// Bytes per HoL chunk: exactly one segment.
pub const CHUNK_BYTES: usize = super::MSS as usize;
/// Application write size in the FCT experiment.
pub const FCT_MESSAGE_BYTES: usize = 64 * 1024;

/// Delivers fixed-size messages out of a byte stream.
#[derive(Debug, Clone, Copy)]
struct FixedFramer(usize);

impl Framer for FixedFramer {
    fn new_sent_message(
        &mut self,
        out: &mut FramerSender,
        data: &[u8],
        _ctx: &MessageContext,
        is_end: bool,
    ) -> Result<(), FramerError> {
        out.send(data.to_vec(), is_end);
        Ok(())
    }

    fn handle_received_data(&mut self, cursor: &mut ReceiveCursor) -> Result<(), FramerError> {
        let (_, ctx, _) = cursor.parse(self.0, self.0)?;
        cursor.deliver_and_advance_receive_cursor(ctx, self.0, true)
    }
}

/// Re-arms a receive after every message, forever.
fn receive_forever(conn: &Connection, mut on_msg: impl FnMut(&Connection, &Message) + Send + 'static) {
    let _ = conn.receive(move |c, m| {
        on_msg(c, &m);
        receive_forever(c, on_msg);
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HolConfig {
    pub ordered: bool,
    pub seed: u64,
    /// Lose the first transmission of chunk 2.
    pub drop: bool,
}

impl HolConfig {
    pub fn new(ordered: bool, seed: u64) -> Self {
        HolConfig {
            ordered,
            seed,
            drop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolReport {
    pub ordered: bool,
    pub seed: u64,
    /// (chunk number, delivery time) in delivery order.
    pub deliveries: Vec<(u8, Duration)>,
    /// When the retransmitted chunk reached the receiver.
    pub retransmission_arrival: Option<Duration>,
}

impl HolReport {
    pub fn order(&self) -> Vec<u8> {
        self.deliveries.iter().map(|d| d.0).collect()
    }

    pub fn delivered_at(&self, chunk: u8) -> Option<Duration> {
        self.deliveries.iter().find(|d| d.0 == chunk).map(|d| d.1)
    }
}

impl fmt::Display for HolReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={} ordered={}", self.seed, self.ordered)?;
        if let Some(t) = self.retransmission_arrival {
            writeln!(f, "retransmission_arrival t={:.6}", t.as_secs_f64())?;
        }
        for (chunk, t) in &self.deliveries {
            writeln!(f, "deliver chunk={chunk} t={:.6}", t.as_secs_f64())?;
        }
        Ok(())
    }
}

/// Sends four one-segment chunks and records when each reaches the
/// receiving application. Ordered runs use SIM_STREAM; unordered runs use
/// SIM_MSG with unordered messages.
pub fn run_hol_experiment(cfg: HolConfig) -> Result<HolReport> {
    let link = LinkConfig::new(5_000_000, Duration::from_millis(30));
    let mut world = SimWorld::new(cfg.seed, link);
    let protocol = if cfg.ordered {
        ProtocolId::SimStream
    } else {
        ProtocolId::SimMsg
    };
    let client = world.add_host(CLIENT, &[protocol]);
    let server = world.add_host(SERVER, &[protocol]);
    if cfg.drop {
        world.add_drop_rule(DropRule::NthDataSegment { src: CLIENT, n: 2 });
    }
    let mut tp = TransportProperties::new();
    if !cfg.ordered {
        tp.ignore(SelectionProperty::PreserveOrder);
    }

    let deliveries = Arc::new(Mutex::new(Vec::new()));
    let mut pre = Preconnection::new(Some(LocalEndpoint::new().with_port(PORT)), None, tp.clone(), None)?;
    pre.add_framer(FixedFramer(CHUNK_BYTES))?;
    let listener = pre.listen(&server)?;
    let sink = deliveries.clone();
    listener.on_connection_received(move |_, conn| {
        let sink = sink.clone();
        receive_forever(&conn, move |c, m| {
            let t = c.system().now();
            sink.lock().unwrap().push((m.data[0], t));
        });
    });

    let remote = RemoteEndpoint::new().with_address(SERVER.to_string()).with_port(PORT);
    let mut pre = Preconnection::new(None, Some(remote), tp, None)?;
    let conn = pre.initiate(&client)?;
    let props = if cfg.ordered {
        MessageProperties::default()
    } else {
        MessageProperties::default().unordered()
    };
    conn.on_ready(move |c| {
        for chunk in 1..=4u8 {
            let _ = c.send_with(vec![chunk; CHUNK_BYTES], props, true);
        }
    });

    let done = deliveries.clone();
    world.run_while(Duration::from_secs(30), || done.lock().unwrap().len() >= 4);
    let retransmission_arrival = world
        .packet_log()
        .iter()
        .find(|p| p.src.ip() == CLIENT && p.kind == PacketKind::Data && p.retransmission)
        .and_then(|p| p.arrival);
    let deliveries = deliveries.lock().unwrap().clone();
    Ok(HolReport {
        ordered: cfg.ordered,
        seed: cfg.seed,
        deliveries,
        retransmission_arrival,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FctMode {
    /// The short flow is a clone: a new stream of the long flow's association.
    Clone,
    /// The short flow is its own connection with a fresh window.
    Separate,
}

impl FctMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FctMode::Clone => "clone",
            FctMode::Separate => "separate",
        }
    }
}

impl fmt::Display for FctMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FctMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clone" => Ok(FctMode::Clone),
            "separate" => Ok(FctMode::Separate),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FctConfig {
    pub long_bytes: u64,
    pub short_bytes: u64,
    pub join_after: Duration,
    pub rate_bps: u64,
    pub delay_ms: u64,
    pub mode: FctMode,
    pub seed: u64,
    /// Bottleneck queue in packets; `None` means one bandwidth-delay product.
    pub queue: Option<usize>,
}

impl FctConfig {
    /// 1.5 MB, then 100 KB after 1 s, over 5 Mbit/s and 30 ms.
    pub fn desk(mode: FctMode) -> Self {
        FctConfig {
            long_bytes: 1_500_000,
            short_bytes: 100_000,
            join_after: Duration::from_secs(1),
            rate_bps: 5_000_000,
            delay_ms: 30,
            mode,
            seed: 1,
            queue: None,
        }
    }

    /// 15 MB, then 1 MB after 10 s, over 5 Mbit/s and 30 ms.
    pub fn full(mode: FctMode) -> Self {
        FctConfig {
            long_bytes: 15_000_000,
            short_bytes: 1_000_000,
            join_after: Duration::from_secs(10),
            ..Self::desk(mode)
        }
    }

    pub fn queue_packets(&self) -> usize {
        self.queue
            .unwrap_or_else(|| bdp_packets(self.rate_bps, Duration::from_millis(2 * self.delay_ms)))
    }

    fn validate(&self) -> Result<()> {
        if self.long_bytes == 0 || self.short_bytes == 0 {
            return Err(Error::Config("flow sizes must be positive".into()));
        }
        if self.rate_bps == 0 {
            return Err(Error::Config("link rate must be positive".into()));
        }
        if self.queue == Some(0) {
            return Err(Error::Config("queue must hold at least one packet".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowResult {
    pub bytes: u64,
    pub start: Duration,
    pub completion: Duration,
}

impl FlowResult {
    pub fn fct(&self) -> Duration {
        self.completion - self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FctReport {
    pub seed: u64,
    pub mode: FctMode,
    pub long: FlowResult,
    pub short: FlowResult,
}

impl fmt::Display for FctReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        for (name, flow) in [("long", &self.long), ("short", &self.short)] {
            writeln!(
                f,
                "flow={name} mode={} bytes={} start={:.6} fct={:.6}",
                self.mode,
                flow.bytes,
                flow.start.as_secs_f64(),
                flow.fct().as_secs_f64()
            )?;
        }
        Ok(())
    }
}

/// Short-flow FCT reduction of `clone` relative to `separate`, in percent.
pub fn reduction_pct(clone: &FctReport, separate: &FctReport) -> f64 {
    let sep = separate.short.fct().as_secs_f64();
    (sep - clone.short.fct().as_secs_f64()) / sep * 100.0
}

#[derive(Default)]
struct FlowProgress {
    received: u64,
    completion: Option<Duration>,
}

fn send_flow(conn: &Connection, bytes: u64) {
    let mut left = bytes as usize;
    while left > 0 {
        let n = left.min(FCT_MESSAGE_BYTES);
        let _ = conn.send(vec![0xAB; n]);
        left -= n;
    }
}

/// Runs a long flow from t=0 and a short flow from `join_after`, and
/// measures both flows' completion times at the receiver.
pub fn run_fct_experiment(cfg: FctConfig) -> Result<FctReport> {
    run_fct_world(cfg).map(|(report, _)| report)
}

/// Same as [`run_fct_experiment`], also returning the world for inspection.
pub fn run_fct_world(cfg: FctConfig) -> Result<(FctReport, SimWorld)> {
    cfg.validate()?;
    let link = LinkConfig::new(cfg.rate_bps, Duration::from_millis(cfg.delay_ms)).with_queue(cfg.queue_packets());
    let mut world = SimWorld::new(cfg.seed, link);
    let protocols = [ProtocolId::SimStream, ProtocolId::SimMsg];
    let client = world.add_host(CLIENT, &protocols);
    let server = world.add_host(SERVER, &protocols);
    let mut tp = TransportProperties::new();
    match cfg.mode {
        FctMode::Clone => {
            tp.require(SelectionProperty::Multistreaming);
            tp.ignore(SelectionProperty::PreserveOrder);
        }
        FctMode::Separate => {
            tp.prohibit(SelectionProperty::Multistreaming);
        }
    }

    // Flow 0 is whichever connection the server sees first: the long one.
    let flows: Arc<Mutex<Vec<FlowProgress>>> = Arc::default();
    let mut pre = Preconnection::new(Some(LocalEndpoint::new().with_port(PORT)), None, tp.clone(), None)?;
    let listener = pre.listen(&server)?;
    let targets = [cfg.long_bytes, cfg.short_bytes];
    let sink = flows.clone();
    listener.on_connection_received(move |_, conn| {
        let idx = {
            let mut flows = sink.lock().unwrap();
            flows.push(FlowProgress::default());
            flows.len() - 1
        };
        let sink = sink.clone();
        receive_forever(&conn, move |c, m| {
            let mut flows = sink.lock().unwrap();
            let flow = &mut flows[idx];
            flow.received += m.data.len() as u64;
            if flow.completion.is_none() && targets.get(idx).is_some_and(|&t| flow.received >= t) {
                flow.completion = Some(c.system().now());
            }
        });
    });

    let remote = RemoteEndpoint::new().with_address(SERVER.to_string()).with_port(PORT);
    let mut pre = Preconnection::new(None, Some(remote), tp, None)?;
    let long = pre.initiate(&client)?;
    let long_bytes = cfg.long_bytes;
    long.on_ready(move |c| send_flow(c, long_bytes));
    long.on_establishment_error(|_, cause| panic!("long flow failed to establish: {cause}"));

    world.run_until(cfg.join_after);
    let short_start = world.now();
    let short_bytes = cfg.short_bytes;
    let short = match cfg.mode {
        FctMode::Clone => long.clone_connection(|_, cause| panic!("clone failed: {cause}"))?,
        FctMode::Separate => pre.initiate(&client)?,
    };
    short.on_ready(move |c| send_flow(c, short_bytes));

    let serial = (cfg.long_bytes + cfg.short_bytes) * 8 * 1_000_000 / cfg.rate_bps;
    let limit = cfg.join_after + Duration::from_micros(serial) * 4 + Duration::from_secs(60);
    let done = flows.clone();
    let finished = world.run_while(limit, || {
        let flows = done.lock().unwrap();
        flows.len() == 2 && flows.iter().all(|f| f.completion.is_some())
    });
    if !finished {
        return Err(Error::Timeout);
    }
    let flows = flows.lock().unwrap();
    let report = FctReport {
        seed: cfg.seed,
        mode: cfg.mode,
        long: FlowResult {
            bytes: cfg.long_bytes,
            start: Duration::ZERO,
            completion: flows[0].completion.unwrap(),
        },
        short: FlowResult {
            bytes: cfg.short_bytes,
            start: short_start,
            completion: flows[1].completion.unwrap(),
        },
    };
    drop(flows);
    Ok((report, world))
}
