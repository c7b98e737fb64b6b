use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, ToSocketAddrs};
use std::time::{Duration, Instant};

use mio::net::{TcpListener, TcpStream, UdpSocket};
use mio::{Events, Interest, Poll, Token};
use socket2::{Domain, SockRef, Socket, Type};

use super::{AcceptorId, CarrierId, CarrierKind, CloseMode, MessageOptions, NetEvent, Network, SendStatus};
use crate::error::{Error, Result};

const READ_CHUNK: usize = 64 * 1024;

#[derive(Debug)]
struct StreamEntry {
    sock: TcpStream,
    connecting: bool,
    out: Vec<u8>,
    /// Closed by us: flush, half-close, then drain until the peer finishes.
    closing: bool,
    shut: bool,
    eof: bool,
}

#[derive(Debug)]
enum Entry {
    Stream(StreamEntry),
    Listener(TcpListener),
    Udp(UdpSocket),
}

/// [`Network`] over the host's TCP and UDP sockets.
pub struct RealNetwork {
    poll: Poll,
    events: Events,
    epoch: Instant,
    entries: HashMap<u64, Entry>,
    pending: Vec<NetEvent>,
    next_id: u64,
}

impl std::fmt::Debug for RealNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealNetwork")
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl RealNetwork {
    pub fn new() -> Result<Self> {
        Ok(RealNetwork {
            poll: Poll::new()?,
            events: Events::with_capacity(256),
            epoch: Instant::now(),
            entries: HashMap::new(),
            pending: Vec::new(),
            next_id: 1,
        })
    }

    fn id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn stream(&mut self, carrier: CarrierId) -> Result<&mut StreamEntry> {
        match self.entries.get_mut(&carrier.0) {
            Some(Entry::Stream(s)) if !s.closing => Ok(s),
            _ => Err(Error::CarrierClosed),
        }
    }

    fn register_stream(&mut self, mut sock: TcpStream, connecting: bool) -> Result<CarrierId> {
        let id = self.id();
        self.poll
            .registry()
            .register(&mut sock, Token(id as usize), Interest::READABLE | Interest::WRITABLE)?;
        self.entries.insert(
            id,
            Entry::Stream(StreamEntry {
                sock,
                connecting,
                out: Vec::new(),
                closing: false,
                shut: false,
                eof: false,
            }),
        );
        Ok(CarrierId(id))
    }

    fn drop_entry(&mut self, id: u64) {
        if let Some(entry) = self.entries.remove(&id) {
            let registry = self.poll.registry();
            let _ = match entry {
                Entry::Stream(mut s) => registry.deregister(&mut s.sock),
                Entry::Listener(mut l) => registry.deregister(&mut l),
                Entry::Udp(mut u) => registry.deregister(&mut u),
            };
        }
    }

    fn on_ready(&mut self, id: u64, readable: bool, writable: bool) {
        let mut out = Vec::new();
        let mut remove = false;
        let mut accepted = Vec::new();
        match self.entries.get_mut(&id) {
            Some(Entry::Stream(s)) => {
                let carrier = CarrierId(id);
                if s.connecting {
                    if !writable && !readable {
                        return;
                    }
                    match s.sock.take_error() {
                        Ok(Some(e)) | Err(e) => {
                            out.push(NetEvent::ConnectFailed(carrier, e.to_string()));
                            remove = true;
                        }
                        Ok(None) => match s.sock.peer_addr() {
                            Ok(_) => {
                                s.connecting = false;
                                out.push(NetEvent::Connected(carrier));
                            }
                            Err(e) if e.kind() == io::ErrorKind::NotConnected => return,
                            Err(e) => {
                                out.push(NetEvent::ConnectFailed(carrier, e.to_string()));
                                remove = true;
                            }
                        },
                    }
                }
                if !remove && !s.connecting && flush(s).is_err() {
                    if !s.closing {
                        out.push(NetEvent::PeerReset(carrier));
                    }
                    remove = true;
                }
                if !remove && !s.connecting && readable {
                    let mut buf = vec![0u8; READ_CHUNK];
                    loop {
                        match s.sock.read(&mut buf) {
                            Ok(0) => {
                                s.eof = true;
                                if !s.closing {
                                    out.push(NetEvent::PeerClosed(carrier));
                                }
                                break;
                            }
                            Ok(n) => {
                                if !s.closing {
                                    out.push(NetEvent::Data(carrier, buf[..n].to_vec()));
                                }
                            }
                            Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                            Err(_) => {
                                if !s.closing {
                                    out.push(NetEvent::PeerReset(carrier));
                                }
                                remove = true;
                                break;
                            }
                        }
                    }
                }
                if s.closing && s.shut && s.eof {
                    remove = true;
                }
            }
            Some(Entry::Listener(l)) => loop {
                match l.accept() {
                    Ok((sock, peer)) => accepted.push((sock, peer)),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(_) => break,
                }
            },
            Some(Entry::Udp(u)) => {
                let mut buf = vec![0u8; 65536];
                loop {
                    match u.recv_from(&mut buf) {
                        Ok((n, from)) => out.push(NetEvent::Datagram {
                            carrier: CarrierId(id),
                            from,
                            data: buf[..n].to_vec(),
                        }),
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        // ICMP errors from earlier sends surface here; skip them.
                        Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                        Err(_) => break,
                    }
                }
            }
            None => {}
        }
        for (sock, peer) in accepted {
            let _ = sock.set_nodelay(true);
            if let Ok(carrier) = self.register_stream(sock, false) {
                out.push(NetEvent::Accepted {
                    acceptor: Some(AcceptorId(id)),
                    carrier,
                    peer,
                    sibling_of: None,
                });
            }
        }
        if remove {
            self.drop_entry(id);
        }
        self.pending.extend(out);
    }
}

fn flush(s: &mut StreamEntry) -> io::Result<()> {
    while !s.out.is_empty() {
        match s.sock.write(&s.out) {
            Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
            Ok(n) => {
                s.out.drain(..n);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    if s.closing && !s.shut {
        s.shut = true;
        let _ = s.sock.shutdown(Shutdown::Write);
    }
    Ok(())
}

fn bind_listener(local: SocketAddr) -> io::Result<std::net::TcpListener> {
    let sock = Socket::new(Domain::for_address(local), Type::STREAM, None)?;
    sock.set_reuse_address(true)?;
    sock.bind(&local.into())?;
    sock.listen(128)?;
    sock.set_nonblocking(true)?;
    Ok(sock.into())
}

impl Network for RealNetwork {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn resolve(&mut self, host: &str, port: u16) -> Result<Vec<SocketAddr>> {
        let addrs: Vec<SocketAddr> = (host, port)
            .to_socket_addrs()
            .map_err(|e| Error::Resolve(format!("{host}: {e}")))?
            .collect();
        if addrs.is_empty() {
            return Err(Error::Resolve(host.to_owned()));
        }
        Ok(addrs)
    }

    fn connect(&mut self, kind: CarrierKind, remote: SocketAddr) -> Result<CarrierId> {
        if kind != CarrierKind::Stream {
            return Err(Error::Unsupported("message carriers exist only in the simulator"));
        }
        let sock = TcpStream::connect(remote)?;
        let _ = sock.set_nodelay(true);
        self.register_stream(sock, true)
    }

    fn open_sibling(&mut self, _carrier: CarrierId) -> Result<CarrierId> {
        Err(Error::Unsupported("sibling streams need a message carrier"))
    }

    fn listen(&mut self, kind: CarrierKind, local: SocketAddr) -> Result<AcceptorId> {
        if kind != CarrierKind::Stream {
            return Err(Error::Unsupported("message carriers exist only in the simulator"));
        }
        let mut listener = TcpListener::from_std(bind_listener(local)?);
        let id = self.id();
        self.poll
            .registry()
            .register(&mut listener, Token(id as usize), Interest::READABLE)?;
        self.entries.insert(id, Entry::Listener(listener));
        Ok(AcceptorId(id))
    }

    fn close_acceptor(&mut self, acceptor: AcceptorId) {
        if matches!(self.entries.get(&acceptor.0), Some(Entry::Listener(_))) {
            self.drop_entry(acceptor.0);
        }
    }

    fn bind_datagram(&mut self, local: SocketAddr) -> Result<CarrierId> {
        let mut sock = UdpSocket::bind(local)?;
        let id = self.id();
        self.poll
            .registry()
            .register(&mut sock, Token(id as usize), Interest::READABLE)?;
        self.entries.insert(id, Entry::Udp(sock));
        Ok(CarrierId(id))
    }

    fn send(&mut self, carrier: CarrierId, data: &[u8], _opts: MessageOptions) -> Result<SendStatus> {
        let s = self.stream(carrier)?;
        s.out.extend_from_slice(data);
        if !s.connecting {
            flush(s)?;
        }
        Ok(SendStatus::Accepted)
    }

    fn send_to(&mut self, carrier: CarrierId, to: SocketAddr, data: &[u8]) -> Result<()> {
        let Some(Entry::Udp(u)) = self.entries.get(&carrier.0) else {
            return Err(Error::CarrierClosed);
        };
        match u.send_to(data, to) {
            Ok(_) => Ok(()),
            // A full socket buffer loses the datagram, as the network might.
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn close(&mut self, carrier: CarrierId, mode: CloseMode) {
        match self.entries.get_mut(&carrier.0) {
            Some(Entry::Stream(s)) => match mode {
                CloseMode::Abort => {
                    let _ = SockRef::from(&s.sock).set_linger(Some(Duration::ZERO));
                    self.drop_entry(carrier.0);
                }
                CloseMode::Graceful => {
                    if s.closing {
                        return;
                    }
                    s.closing = true;
                    if s.connecting || flush(s).is_err() || (s.shut && s.eof) {
                        self.drop_entry(carrier.0);
                    }
                }
            },
            Some(Entry::Udp(_)) => self.drop_entry(carrier.0),
            _ => {}
        }
    }

    fn set_dscp(&mut self, carrier: CarrierId, dscp: u8) {
        let tos = u32::from(dscp & 0x3f) << 2;
        match self.entries.get(&carrier.0) {
            Some(Entry::Stream(s)) => {
                let _ = SockRef::from(&s.sock).set_tos(tos);
            }
            Some(Entry::Udp(u)) => {
                let _ = SockRef::from(u).set_tos(tos);
            }
            _ => {}
        }
    }

    fn local_addr(&self, carrier: CarrierId) -> Option<SocketAddr> {
        match self.entries.get(&carrier.0)? {
            Entry::Stream(s) => s.sock.local_addr().ok(),
            Entry::Listener(l) => l.local_addr().ok(),
            Entry::Udp(u) => u.local_addr().ok(),
        }
    }

    fn acceptor_addr(&self, acceptor: AcceptorId) -> Option<SocketAddr> {
        match self.entries.get(&acceptor.0)? {
            Entry::Listener(l) => l.local_addr().ok(),
            _ => None,
        }
    }

    fn poll(&mut self, timeout: Option<Duration>) -> Result<Vec<NetEvent>> {
        if self.pending.is_empty() {
            match self.poll.poll(&mut self.events, timeout) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
            let ready: Vec<(u64, bool, bool)> = self
                .events
                .iter()
                .map(|e| {
                    (
                        e.token().0 as u64,
                        e.is_readable() || e.is_read_closed() || e.is_error(),
                        e.is_writable() || e.is_write_closed() || e.is_error(),
                    )
                })
                .collect();
            for (id, r, w) in ready {
                self.on_ready(id, r, w);
            }
        }
        Ok(std::mem::take(&mut self.pending))
    }
}
