use std::net::IpAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use taps_core::netsim::experiments::{CLIENT, SERVER};
use taps_core::netsim::{LinkConfig, SimWorld};
use taps_core::{
    Connection, Error, HeaderFramer, LocalEndpoint, Message, Preconnection, ProtocolId, RemoteEndpoint, Result,
    SelectionProperty, SystemPolicy, TransportProperties, TransportSystem,
};

fn describe(m: &Message) -> String {
    format!(
        "Got message with length {}: {}",
        m.data.len(),
        String::from_utf8_lossy(&m.data)
    )
}

fn echo_forever(conn: &Connection, print: bool) {
    let _ = conn.receive(move |c, m| {
        if print {
            println!("{}", describe(&m));
        }
        let _ = c.send(&m.data);
        echo_forever(c, print);
    });
}

/// Listens with default properties and echoes every message back.
pub fn start_server(system: &TransportSystem, port: u16, print: bool) -> Result<u16> {
    let local = LocalEndpoint::new().with_port(port);
    let mut pre = Preconnection::new(Some(local), None, TransportProperties::new(), None)?;
    let listener = pre.listen(system)?;
    listener.on_connection_received(move |_, conn| echo_forever(&conn, print));
    listener.port()
}

#[derive(Default)]
pub struct ClientState {
    pub replies: AtomicUsize,
    pub failed: AtomicBool,
}

impl ClientState {
    pub fn finished(&self) -> bool {
        self.failed.load(Ordering::SeqCst) || self.replies.load(Ordering::SeqCst) >= 2
    }
}

fn print_reply(conn: &Connection, state: &Arc<ClientState>, print: bool) {
    let state = state.clone();
    let _ = conn.receive(move |c, m| {
        if print {
            println!("{}", describe(&m));
        }
        state.replies.fetch_add(1, Ordering::SeqCst);
        c.close();
    });
}

/// Sends "FIVE!" on a reliable byte stream, clones the connection, sends
/// "HelloWorld" on the clone, and prints both replies.
pub fn start_client(system: &TransportSystem, host: &str, port: u16, print: bool) -> Result<Arc<ClientState>> {
    let mut tp = TransportProperties::new();
    tp.require(SelectionProperty::Reliability);
    tp.prohibit(SelectionProperty::PreserveMsgBoundaries);
    let remote = RemoteEndpoint::new().with_address(host).with_port(port);
    let mut pre = Preconnection::new(None, Some(remote), tp, None)?;
    pre.add_framer(HeaderFramer)?;
    let conn = pre.initiate(system)?;
    let state = Arc::new(ClientState::default());

    let st = state.clone();
    conn.on_establishment_error(move |_, cause| {
        eprintln!("establishment failed: {cause}");
        st.failed.store(true, Ordering::SeqCst);
    });
    let st = state.clone();
    conn.on_connection_error(move |_, cause| {
        eprintln!("connection error: {cause}");
        st.failed.store(true, Ordering::SeqCst);
    });
    let st = state.clone();
    conn.on_ready(move |c| {
        print_reply(c, &st, print);
        let _ = c.send("FIVE!");
        let fail = st.clone();
        let clone = c.clone_connection(move |_, cause| {
            eprintln!("clone failed: {cause}");
            fail.failed.store(true, Ordering::SeqCst);
        });
        match clone {
            Ok(clone) => {
                let st = st.clone();
                clone.on_ready(move |c2| {
                    print_reply(c2, &st, print);
                    let _ = c2.send("HelloWorld");
                });
            }
            Err(e) => {
                eprintln!("clone failed: {e}");
                st.failed.store(true, Ordering::SeqCst);
            }
        }
    });
    Ok(state)
}

pub fn run_server(port: u16, verbose: bool) -> Result<()> {
    let system = TransportSystem::new()?;
    system.set_verbose(verbose);
    let bound = start_server(&system, port, true)?;
    eprintln!("listening port={bound}");
    let interrupted = Arc::new(AtomicBool::new(false));
    let flag = interrupted.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| Error::Config(format!("cannot install signal handler: {e}")))?;
    system.run_until(|| interrupted.load(Ordering::SeqCst))?;
    system.close_all();
    let deadline = Instant::now() + Duration::from_millis(500);
    system.run_until(|| system.open_connections() == 0 || Instant::now() >= deadline)
}

pub fn run_client(host: &str, port: u16, verbose: bool) -> Result<bool> {
    let system = TransportSystem::new()?;
    system.set_verbose(verbose);
    let state = start_client(&system, host, port, true)?;
    system.run_until(|| state.finished())?;
    let deadline = Instant::now() + Duration::from_millis(200);
    system.run_until(|| system.open_connections() == 0 || Instant::now() >= deadline)?;
    Ok(!state.failed.load(Ordering::SeqCst))
}

/// Runs both ends of the demo on the simulator, printing one side.
pub fn run_sim(print_server: bool, port: u16, verbose: bool) -> Result<bool> {
    let policy = SystemPolicy::from_env()?;
    let link = LinkConfig::new(100_000_000, Duration::from_millis(1));
    let mut world = SimWorld::new(0, link);
    let protocols = [ProtocolId::SimStream, ProtocolId::SimMsg];
    let hosts: [IpAddr; 2] = [CLIENT, SERVER];
    for ip in hosts {
        let system = world.add_host(ip, &protocols);
        system.set_policy(policy.clone());
        system.set_verbose(verbose);
    }
    let server = world.system(SERVER).unwrap().clone();
    let client = world.system(CLIENT).unwrap().clone();
    start_server(&server, port, print_server)?;
    let state = start_client(&client, &SERVER.to_string(), port, !print_server)?;
    world.run_while(Duration::from_secs(30), || state.finished());
    Ok(state.replies.load(Ordering::SeqCst) == 2 && !state.failed.load(Ordering::SeqCst))
}
