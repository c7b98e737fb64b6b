use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use taps_core::{
    Connection, ConnectionState, Event, HeaderFramer, Listener, LocalEndpoint, Preconnection, PreferenceLevel,
    ProtocolId, RemoteEndpoint, SelectionProperty, TransportProperties, TransportSystem,
};

type Accepted = Arc<Mutex<Vec<Connection>>>;

fn listen(system: &TransportSystem, tp: TransportProperties) -> (Listener, Accepted, u16) {
    let local = LocalEndpoint::new().with_host("127.0.0.1").with_port(0);
    let mut pre = Preconnection::new(Some(local), None, tp, None).unwrap();
    let l = pre.listen(system).unwrap();
    let accepted: Accepted = Arc::default();
    let sink = accepted.clone();
    l.on_connection_received(move |_, c| sink.lock().unwrap().push(c));
    let port = l.port().unwrap();
    assert_ne!(port, 0);
    (l, accepted, port)
}

fn initiate(system: &TransportSystem, port: u16, tp: TransportProperties) -> Connection {
    let remote = RemoteEndpoint::new().with_address("127.0.0.1").with_port(port);
    Preconnection::new(None, Some(remote), tp, None)
        .unwrap()
        .initiate(system)
        .unwrap()
}

fn run(system: &TransportSystem, mut done: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    system.run_until(|| done() || Instant::now() > deadline).unwrap();
    assert!(done(), "timed out");
}

fn echo(conn: &Connection) {
    let _ = conn.receive(|c, m| {
        let _ = c.send(&m.data);
        echo(c);
    });
}

fn first_reply(conn: &Connection) -> Arc<Mutex<Option<Vec<u8>>>> {
    let slot: Arc<Mutex<Option<Vec<u8>>>> = Arc::default();
    let sink = slot.clone();
    conn.receive(move |_, m| *sink.lock().unwrap() = Some(m.data)).unwrap();
    slot
}

#[test]
fn msgmux_wins_on_loopback_and_clones_share_the_carrier() {
    let system = TransportSystem::new().unwrap();
    let (_l, accepted, port) = listen(&system, TransportProperties::new());
    let c = initiate(&system, port, TransportProperties::new());
    run(&system, || c.state() == ConnectionState::Established);
    assert_eq!(c.protocol(), Some(ProtocolId::Msgmux));

    let c2 = c.clone_connection(|_, e| panic!("{e}")).unwrap();
    run(&system, || c2.state() == ConnectionState::Established);
    assert_eq!(c2.protocol(), Some(ProtocolId::Msgmux));
    assert_eq!(c.group(), c2.group());
    assert_eq!(c.remote(), c2.remote());

    run(&system, || accepted.lock().unwrap().len() == 2);
    for peer in accepted.lock().unwrap().iter() {
        echo(peer);
    }
    let r1 = first_reply(&c);
    let r2 = first_reply(&c2);
    c.send("FIVE!").unwrap();
    c2.send("HelloWorld").unwrap();
    run(&system, || r1.lock().unwrap().is_some() && r2.lock().unwrap().is_some());
    assert_eq!(r1.lock().unwrap().as_deref(), Some(&b"FIVE!"[..]));
    assert_eq!(r2.lock().unwrap().as_deref(), Some(&b"HelloWorld"[..]));

    let on_closed = Arc::new(Mutex::new(false));
    let flag = on_closed.clone();
    c.on_closed(move |_| *flag.lock().unwrap() = true);
    c.close();
    run(&system, || *on_closed.lock().unwrap());
    assert_eq!(c2.state(), ConnectionState::Established);
}

#[test]
fn byte_stream_with_framer_over_tcp() {
    let system = TransportSystem::new().unwrap();
    let (_l, accepted, port) = listen(&system, TransportProperties::new());
    let mut tp = TransportProperties::new();
    tp.require(SelectionProperty::Reliability);
    tp.prohibit(SelectionProperty::PreserveMsgBoundaries);
    let remote = RemoteEndpoint::new().with_address("127.0.0.1").with_port(port);
    let mut pre = Preconnection::new(None, Some(remote), tp, None).unwrap();
    pre.add_framer(HeaderFramer).unwrap();
    let c = pre.initiate(&system).unwrap();
    run(&system, || c.state() == ConnectionState::Established);
    assert_eq!(c.protocol(), Some(ProtocolId::Tcp));
    run(&system, || accepted.lock().unwrap().len() == 1);
    echo(&accepted.lock().unwrap()[0]);
    let reply = first_reply(&c);
    c.send("FIVE!").unwrap();
    run(&system, || reply.lock().unwrap().is_some());
    assert_eq!(reply.lock().unwrap().as_deref(), Some(&b"FIVE!"[..]));
}

#[test]
fn udp_listener_on_loopback() {
    let system = TransportSystem::new().unwrap();
    let mut tp = TransportProperties::new();
    tp.set(SelectionProperty::Reliability, PreferenceLevel::Ignore);
    tp.ignore(SelectionProperty::PreserveOrder);
    let (l, accepted, port) = listen(&system, tp);
    assert!(l.protocols().contains(&ProtocolId::Udp));
    let mut dtp = TransportProperties::new();
    dtp.prohibit(SelectionProperty::Reliability);
    dtp.ignore(SelectionProperty::PreserveOrder);
    let c = initiate(&system, port, dtp);
    run(&system, || c.state() == ConnectionState::Established);
    assert_eq!(c.protocol(), Some(ProtocolId::Udp));
    c.send("datagram").unwrap();
    run(&system, || accepted.lock().unwrap().len() == 1);
    let peer = accepted.lock().unwrap()[0].clone();
    assert_eq!(peer.protocol(), Some(ProtocolId::Udp));
    echo(&peer);
    let reply = first_reply(&c);
    c.send("again").unwrap();
    run(&system, || reply.lock().unwrap().is_some());
    let got = reply.lock().unwrap().clone().unwrap();
    assert!(got == b"datagram" || got == b"again");
}

#[test]
fn refused_port_reports_establishment_error() {
    let system = TransportSystem::new().unwrap();
    let port = {
        let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let c = initiate(&system, port, TransportProperties::new());
    run(&system, || c.state() == ConnectionState::Closed);
    let evs: Vec<Event> = system
        .trace()
        .into_iter()
        .filter(|r| r.conn == c.id())
        .map(|r| r.event)
        .collect();
    assert!(matches!(evs.as_slice(), [Event::EstablishmentError(_)]), "{evs:?}");
}
