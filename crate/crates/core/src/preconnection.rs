//! Endpoints and the pre-establishment bundle.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;

use crate::connection::{Connection, Listener};
use crate::error::{Error, Result};
use crate::framer::Framer;
use crate::properties::{MessageProperties, SecurityParameters, TransportProperties};
use crate::system::{FramerFactory, TransportSystem};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalEndpoint {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub interface: Option<String>,
}

impl LocalEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_host(mut self, host: impl Into<String>) -> Self {
        self.host = Some(host.into());
        self
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = Some(port);
        self
    }

    pub fn with_interface(mut self, name: impl Into<String>) -> Self {
        self.interface = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RemoteEndpoint {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub interface: Option<String>,
}

impl RemoteEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_host(mut self, host: impl Into<String>) -> Self {
        self.host = Some(host.into());
        self
    }

    /// Same as [`RemoteEndpoint::with_host`], for literal addresses.
    pub fn with_address(self, address: impl Into<String>) -> Self {
        self.with_host(address)
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = Some(port);
        self
    }

    pub fn with_interface(mut self, name: impl Into<String>) -> Self {
        self.interface = Some(name.into());
        self
    }
}

/// Everything needed to initiate or listen: endpoints, properties and
/// framers. Framers can only be added before the first initiate/listen.
#[derive(Clone)]
pub struct Preconnection {
    local: Option<LocalEndpoint>,
    remote: Option<RemoteEndpoint>,
    tp: TransportProperties,
    security: SecurityParameters,
    framers: Vec<FramerFactory>,
    started: bool,
}

impl std::fmt::Debug for Preconnection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Preconnection")
            .field("local", &self.local)
            .field("remote", &self.remote)
            .field("tp", &self.tp)
            .field("framers", &self.framers.len())
            .field("started", &self.started)
            .finish()
    }
}

impl Preconnection {
    pub fn new(
        local: Option<LocalEndpoint>,
        remote: Option<RemoteEndpoint>,
        tp: TransportProperties,
        security: Option<SecurityParameters>,
    ) -> Result<Self> {
        if local.is_none() && remote.is_none() {
            return Err(Error::MissingEndpoint);
        }
        Ok(Preconnection {
            local,
            remote,
            tp,
            security: security.unwrap_or_default(),
            framers: Vec::new(),
            started: false,
        })
    }

    pub fn local(&self) -> Option<&LocalEndpoint> {
        self.local.as_ref()
    }

    pub fn remote(&self) -> Option<&RemoteEndpoint> {
        self.remote.as_ref()
    }

    pub fn transport_properties(&self) -> &TransportProperties {
        &self.tp
    }

    pub fn security(&self) -> &SecurityParameters {
        &self.security
    }

    pub fn framer_count(&self) -> usize {
        self.framers.len()
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    /// Appends a framer. Each connection gets its own copy.
    pub fn add_framer<F: Framer + Clone + Sync + 'static>(&mut self, framer: F) -> Result<&mut Self> {
        self.add_framer_factory(move || Box::new(framer.clone()))
    }

    /// Appends a framer built fresh for each connection.
    pub fn add_framer_factory(
        &mut self,
        factory: impl Fn() -> Box<dyn Framer> + Send + Sync + 'static,
    ) -> Result<&mut Self> {
        if self.started {
            return Err(Error::AlreadyStarted);
        }
        self.framers.push(Arc::new(factory));
        Ok(self)
    }

    fn remotes(&self, system: &TransportSystem) -> Result<Vec<SocketAddr>> {
        let remote = self.remote.as_ref().ok_or(Error::MissingEndpoint)?;
        let (Some(host), Some(port)) = (remote.host.as_deref(), remote.port) else {
            return Err(Error::MissingEndpoint);
        };
        let addrs = system.lock().resolve(host, port)?;
        if addrs.is_empty() {
            return Err(Error::Resolve(host.to_owned()));
        }
        Ok(addrs)
    }

    fn tp_with_interface(&self) -> TransportProperties {
        let mut tp = self.tp.clone();
        let iface = self.remote.as_ref().and_then(|r| r.interface.clone());
        let iface = iface.or_else(|| self.local.as_ref().and_then(|l| l.interface.clone()));
        if let (Some(name), None) = (iface, tp.interface_pref()) {
            tp.set_interface(name, crate::properties::PreferenceLevel::Require);
        }
        tp
    }

    /// Starts racing candidates. Returns at once; `Ready` or
    /// `EstablishmentError` is delivered later by the event loop.
    pub fn initiate(&mut self, system: &TransportSystem) -> Result<Connection> {
        let remotes = self.remotes(system)?;
        let tp = self.tp_with_interface();
        let id = system.lock().initiate(&tp, &remotes, self.framers.clone(), None)?;
        self.started = true;
        Ok(Connection::new(system.clone(), id))
    }

    /// Like [`Preconnection::initiate`], with a first message that goes out
    /// as soon as the winning protocol allows.
    pub fn initiate_with_send(
        &mut self,
        system: &TransportSystem,
        data: impl AsRef<[u8]>,
        props: MessageProperties,
    ) -> Result<Connection> {
        let data = data.as_ref();
        if data.is_empty() {
            return Err(Error::InvalidMessage("empty message"));
        }
        let remotes = self.remotes(system)?;
        let tp = self.tp_with_interface();
        let id = system
            .lock()
            .initiate(&tp, &remotes, self.framers.clone(), Some((data.to_vec(), props)))?;
        self.started = true;
        Ok(Connection::new(system.clone(), id))
    }

    /// Binds every eligible protocol on the local endpoint's port.
    pub fn listen(&mut self, system: &TransportSystem) -> Result<Listener> {
        let local = self.local.as_ref().ok_or(Error::MissingEndpoint)?;
        let port = local.port.ok_or(Error::MissingEndpoint)?;
        let ip = match local.host.as_deref() {
            None => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            Some(h) => match h.parse::<IpAddr>() {
                Ok(ip) => ip,
                Err(_) => system
                    .lock()
                    .resolve(h, port)?
                    .first()
                    .map(|a| a.ip())
                    .ok_or_else(|| Error::Resolve(h.to_owned()))?,
            },
        };
        let tp = self.tp_with_interface();
        let id = system
            .lock()
            .listen(&tp, SocketAddr::new(ip, port), self.framers.clone())?;
        self.started = true;
        Ok(Listener::new(system.clone(), id))
    }

    /// Runs the system's event loop until it is stopped.
    pub fn start(&self, system: &TransportSystem) -> Result<()> {
        system.run()
    }
}
