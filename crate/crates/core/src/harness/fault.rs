use std::collections::BTreeMap;
use std::fmt;
use std::net::{TcpListener, UdpSocket};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{Federation, HARNESS_QUEUE_BOUND, PROBE_PRIVATE};
use crate::cache::CacheServer;
use crate::model::{Component, Event, MonitorRecord, ObjectPath, Secret};
use crate::origin::OriginServer;
use crate::redirector::{RedirectorServer, HEARTBEAT_INTERVAL};
use crate::wire::encode_monitor_record;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fault {
    KillRedirector,
    KillOrigin(String),
    KillCache(String),
    StallCollector,
    FillShovelerQueue,
    /// Replaces the secret the services verify tokens with; defaults to the
    /// protected probe namespace.
    CorruptNamespaceSecret(Option<ObjectPath>),
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::KillRedirector => f.write_str("kill_redirector"),
            Fault::KillOrigin(id) => write!(f, "kill_origin:{id}"),
            Fault::KillCache(id) => write!(f, "kill_cache:{id}"),
            Fault::StallCollector => f.write_str("stall_collector"),
            Fault::FillShovelerQueue => f.write_str("fill_shoveler_queue"),
            Fault::CorruptNamespaceSecret(None) => f.write_str("corrupt_namespace_secret"),
            Fault::CorruptNamespaceSecret(Some(p)) => write!(f, "corrupt_namespace_secret:{p}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("unknown fault {0:?}")]
    UnknownKind(String),
    #[error("fault {0} needs an argument")]
    MissingArgument(&'static str),
    #[error("no such service {0:?}")]
    UnknownTarget(String),
    #[error("cannot restart service: {0}")]
    Restart(#[from] std::io::Error),
    #[error("federation did not reach the expected state: {0}")]
    Timeout(String),
}

impl FromStr for Fault {
    type Err = FaultError;
    fn from_str(s: &str) -> Result<Self, FaultError> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let need = |name: &'static str| arg.map(str::to_owned).ok_or(FaultError::MissingArgument(name));
        match kind {
            "kill_redirector" => Ok(Fault::KillRedirector),
            "kill_origin" => Ok(Fault::KillOrigin(need("kill_origin")?)),
            "kill_cache" => Ok(Fault::KillCache(need("kill_cache")?)),
            "stall_collector" => Ok(Fault::StallCollector),
            "fill_shoveler_queue" => Ok(Fault::FillShovelerQueue),
            "corrupt_namespace_secret" => match arg {
                None => Ok(Fault::CorruptNamespaceSecret(None)),
                Some(p) => ObjectPath::parse(p)
                    .map(|p| Fault::CorruptNamespaceSecret(Some(p)))
                    .map_err(|_| FaultError::UnknownTarget(p.to_owned())),
            },
            _ => Err(FaultError::UnknownKind(s.to_owned())),
        }
    }
}

#[derive(Default)]
pub(super) struct ActiveFaults {
    secrets: BTreeMap<ObjectPath, Secret>,
    stalled: bool,
    paused: bool,
    filler_seq: u64,
}

fn filler_datagram(seed: u64, seq: u64) -> Vec<u8> {
    let path = ObjectPath::parse("/_probe/filler").expect("static path");
    let record = MonitorRecord::new(
        Event::Open,
        0,
        "harness",
        Component::Cache,
        &path,
        0,
        "harness",
        &format!("filler-{seed}-{seq}"),
    );
    encode_monitor_record(&record).expect("small record encodes")
}

fn wait_for(what: &str, timeout: Duration, mut done: impl FnMut() -> bool) -> Result<(), FaultError> {
    let deadline = Instant::now() + timeout;
    while !done() {
        if Instant::now() >= deadline {
            return Err(FaultError::Timeout(what.to_owned()));
        }
        thread::sleep(Duration::from_millis(5));
    }
    Ok(())
}

impl Federation {
    fn send_fillers(&mut self, n: usize) -> Result<(), FaultError> {
        let socket = UdpSocket::bind("127.0.0.1:0")?;
        let target = self.shoveler.udp_addr();
        let start = self.shoveler.counters().received;
        for _ in 0..n {
            self.faults.filler_seq += 1;
            socket.send_to(&filler_datagram(self.seed, self.faults.filler_seq), target)?;
        }
        wait_for("shoveler ingest", Duration::from_secs(5), || {
            self.shoveler.counters().received >= start + n as u64
        })
    }

    fn await_drain(&self) -> Result<(), FaultError> {
        if self.faults.stalled || self.faults.paused {
            return Ok(());
        }
        wait_for("shoveler queue to drain", Duration::from_secs(10), || {
            self.shoveler.counters().queue_depth == 0
        })
    }

    fn corrupt_target(&self, prefix: &Option<ObjectPath>) -> ObjectPath {
        prefix
            .clone()
            .unwrap_or_else(|| ObjectPath::parse(PROBE_PRIVATE).expect("static path"))
    }

    /// Activates `fault`; it stays active until [`Federation::clear_fault`].
    pub fn inject_fault(&mut self, fault: &Fault) -> Result<(), FaultError> {
        match fault {
            Fault::KillRedirector => {
                if let Some(mut s) = self.redirector_server.take() {
                    s.shutdown();
                }
            }
            Fault::KillOrigin(id) => {
                let slot = self
                    .origins
                    .iter_mut()
                    .find(|o| &o.origin.spec().id == id)
                    .ok_or_else(|| FaultError::UnknownTarget(id.clone()))?;
                if let Some(mut s) = slot.server.take() {
                    s.shutdown();
                }
            }
            Fault::KillCache(id) => {
                let slot = self
                    .caches
                    .iter_mut()
                    .find(|c| &c.cache.spec().id == id)
                    .ok_or_else(|| FaultError::UnknownTarget(id.clone()))?;
                if let Some(mut s) = slot.server.take() {
                    s.shutdown();
                }
            }
            Fault::StallCollector => {
                self.collector.set_stalled(true);
                self.faults.stalled = true;
                // Enough traffic to cross the warning level but not the
                // critical one.
                self.send_fillers(HARNESS_QUEUE_BOUND * 6 / 10)?;
            }
            Fault::FillShovelerQueue => {
                self.shoveler.set_paused(true);
                self.faults.paused = true;
                self.send_fillers(HARNESS_QUEUE_BOUND + 16)?;
            }
            Fault::CorruptNamespaceSecret(prefix) => {
                let prefix = self.corrupt_target(prefix);
                let old = self
                    .namespaces
                    .replace_secret(&prefix, Secret::new(b"corrupted-secret".to_vec()))
                    .ok_or_else(|| FaultError::UnknownTarget(prefix.to_string()))?;
                self.faults.secrets.entry(prefix).or_insert(old);
            }
        }
        Ok(())
    }

    /// Undoes `fault` and waits for the federation to be healthy again.
    pub fn clear_fault(&mut self, fault: &Fault) -> Result<(), FaultError> {
        match fault {
            Fault::KillRedirector => {
                if self.redirector_server.is_none() {
                    let listener = TcpListener::bind(self.redirector_addr)?;
                    self.redirector_server = Some(RedirectorServer::start(self.redirector.clone(), listener)?);
                    let now = self.clock.now_ms();
                    for o in self.origins.iter().filter(|o| o.server.is_some()) {
                        let _ = self.redirector.register_origin(o.origin.spec(), now);
                    }
                }
            }
            Fault::KillOrigin(id) => {
                let redirector = self.topology.redirector_endpoint.clone();
                let slot = self
                    .origins
                    .iter_mut()
                    .find(|o| &o.origin.spec().id == id)
                    .ok_or_else(|| FaultError::UnknownTarget(id.clone()))?;
                if slot.server.is_none() {
                    let listener = TcpListener::bind(slot.addr)?;
                    slot.server = Some(OriginServer::start(
                        slot.origin.clone(),
                        listener,
                        Some(redirector),
                        HEARTBEAT_INTERVAL,
                    )?);
                }
            }
            Fault::KillCache(id) => {
                let slot = self
                    .caches
                    .iter_mut()
                    .find(|c| &c.cache.spec().id == id)
                    .ok_or_else(|| FaultError::UnknownTarget(id.clone()))?;
                if slot.server.is_none() {
                    let listener = TcpListener::bind(slot.addr)?;
                    slot.server = Some(CacheServer::start(slot.cache.clone(), listener)?);
                }
            }
            Fault::StallCollector => {
                self.collector.set_stalled(false);
                self.faults.stalled = false;
                self.await_drain()?;
            }
            Fault::FillShovelerQueue => {
                self.shoveler.set_paused(false);
                self.faults.paused = false;
                self.await_drain()?;
            }
            Fault::CorruptNamespaceSecret(prefix) => {
                let prefix = self.corrupt_target(prefix);
                if let Some(old) = self.faults.secrets.remove(&prefix) {
                    self.namespaces.replace_secret(&prefix, old);
                }
            }
        }
        Ok(())
    }
}
