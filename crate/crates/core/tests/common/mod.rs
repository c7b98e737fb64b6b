#![allow(dead_code)]

use std::net::{IpAddr, Ipv4Addr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use taps_core::netsim::{LinkConfig, SimWorld};
use taps_core::{
    ConnId, Connection, Event, Listener, LocalEndpoint, Preconnection, ProtocolId, RemoteEndpoint, TransportProperties,
    TransportSystem,
};

pub const CLIENT: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1));
pub const SERVER: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2));
pub const PORT: u16 = 5000;

pub struct Sim {
    pub world: SimWorld,
    pub client: TransportSystem,
    pub server: TransportSystem,
}

/// Two hosts over a 10 Mbit/s, 10 ms link.
pub fn sim(client: &[ProtocolId], server: &[ProtocolId]) -> Sim {
    let mut world = SimWorld::new(1, LinkConfig::new(10_000_000, Duration::from_millis(10)));
    let client = world.add_host(CLIENT, client);
    let server = world.add_host(SERVER, server);
    Sim { world, client, server }
}

impl Sim {
    pub fn settle(&self) {
        self.world.run_until_idle(self.world.now() + Duration::from_secs(30));
    }

    pub fn run_for(&self, d: Duration) {
        self.world.run_for(d);
    }
}

pub type Accepted = Arc<Mutex<Vec<Connection>>>;

/// Listens on `PORT` and collects accepted connections.
pub fn listen(system: &TransportSystem, tp: TransportProperties) -> (Listener, Accepted) {
    let mut pre = Preconnection::new(Some(LocalEndpoint::new().with_port(PORT)), None, tp, None).unwrap();
    let listener = pre.listen(system).unwrap();
    let accepted: Accepted = Arc::default();
    let sink = accepted.clone();
    listener.on_connection_received(move |_, c| sink.lock().unwrap().push(c));
    (listener, accepted)
}

pub fn initiate(system: &TransportSystem, tp: TransportProperties) -> Connection {
    let remote = RemoteEndpoint::new().with_address(SERVER.to_string()).with_port(PORT);
    let mut pre = Preconnection::new(None, Some(remote), tp, None).unwrap();
    pre.initiate(system).unwrap()
}

/// Events recorded for one connection, in order.
pub fn events(system: &TransportSystem, conn: ConnId) -> Vec<Event> {
    system
        .trace()
        .into_iter()
        .filter(|r| r.conn == conn)
        .map(|r| r.event)
        .collect()
}

/// Collects the payloads of every message received on `conn`.
pub fn collect(conn: &Connection) -> Arc<Mutex<Vec<Vec<u8>>>> {
    let sink: Arc<Mutex<Vec<Vec<u8>>>> = Arc::default();
    fn arm(c: &Connection, sink: Arc<Mutex<Vec<Vec<u8>>>>) {
        let _ = c.receive(move |c, m| {
            sink.lock().unwrap().push(m.data);
            arm(c, sink);
        });
    }
    arm(conn, sink.clone());
    sink
}
