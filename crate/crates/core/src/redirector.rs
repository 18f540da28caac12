//! Redirector: maps an object path to the live origin owning its longest
//! registered prefix.

use std::collections::HashMap;
use std::io;
use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::model::{check_endpoint, ObjectPath, OriginSpec};
use crate::net::{self, NetError, Reply, ServerHandle, Service};
use crate::wire::{Method, Request, Response, StatusCode};

pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(10);
pub const LIVENESS_WINDOW_MS: u64 = 30_000;

pub const REGISTER_ID: &str = "Register-Id";
pub const REGISTER_ENDPOINT: &str = "Register-Endpoint";
pub const REGISTER_NAMESPACES: &str = "Register-Namespaces";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistrationError {
    #[error("prefix {prefix} is already owned by {owner}")]
    Conflict { prefix: ObjectPath, owner: String },
    #[error("origin {0} declares no namespaces")]
    NoNamespaces(String),
}

#[derive(Debug, Clone)]
struct OriginEntry {
    endpoint: String,
    prefixes: Vec<ObjectPath>,
    last_seen_ms: u64,
}

#[derive(Debug, Default)]
struct RoutingTable {
    origins: HashMap<String, OriginEntry>,
    owners: HashMap<ObjectPath, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectorCounters {
    pub origins: u64,
    pub prefixes: u64,
    pub locates_total: u64,
    pub registrations_total: u64,
    pub active_connections: u64,
}

pub struct Redirector {
    table: RwLock<RoutingTable>,
    window_ms: u64,
    known_origins: Vec<OriginSpec>,
    clock: SharedClock,
    locates: AtomicU64,
    registrations: AtomicU64,
    active: AtomicU64,
}

impl Redirector {
    /// `known_origins` lets wire registrations omit their namespace list.
    pub fn new(known_origins: Vec<OriginSpec>, clock: SharedClock) -> Self {
        Self::with_window(known_origins, clock, LIVENESS_WINDOW_MS)
    }

    pub fn with_window(known_origins: Vec<OriginSpec>, clock: SharedClock, window_ms: u64) -> Self {
        Self {
            table: RwLock::new(RoutingTable::default()),
            window_ms,
            known_origins,
            clock,
            locates: AtomicU64::new(0),
            registrations: AtomicU64::new(0),
            active: AtomicU64::new(0),
        }
    }

    pub fn register_origin(&self, spec: &OriginSpec, now_ms: u64) -> Result<(), RegistrationError> {
        if spec.namespaces.is_empty() {
            return Err(RegistrationError::NoNamespaces(spec.id.clone()));
        }
        let mut table = self.table.write().unwrap();
        for prefix in &spec.namespaces {
            if let Some(owner) = table.owners.get(prefix) {
                if owner != &spec.id {
                    return Err(RegistrationError::Conflict {
                        prefix: prefix.clone(),
                        owner: owner.clone(),
                    });
                }
            }
        }
        if let Some(previous) = table.origins.remove(&spec.id) {
            for prefix in previous.prefixes {
                table.owners.remove(&prefix);
            }
        }
        for prefix in &spec.namespaces {
            table.owners.insert(prefix.clone(), spec.id.clone());
        }
        table.origins.insert(
            spec.id.clone(),
            OriginEntry {
                endpoint: spec.endpoint.clone(),
                prefixes: spec.namespaces.clone(),
                last_seen_ms: now_ms,
            },
        );
        self.registrations.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn is_live(&self, entry: &OriginEntry, now_ms: u64) -> bool {
        now_ms.saturating_sub(entry.last_seen_ms) <= self.window_ms
    }

    /// Endpoint of the live owner of `path`, if any.
    pub fn owner_endpoint(&self, path: &ObjectPath, now_ms: u64) -> Option<String> {
        let table = self.table.read().unwrap();
        let (_, owner) = table
            .owners
            .iter()
            .filter(|(prefix, _)| path.is_under(prefix))
            .max_by_key(|(prefix, _)| prefix.as_str().len())?;
        let entry = table.origins.get(owner)?;
        self.is_live(entry, now_ms).then(|| entry.endpoint.clone())
    }

    pub fn locate(&self, path: &ObjectPath, now_ms: u64) -> Response {
        self.locates.fetch_add(1, Ordering::SeqCst);
        match self.owner_endpoint(path, now_ms) {
            Some(endpoint) => Response::redirect(&endpoint),
            None => Response::empty(StatusCode::NotFound),
        }
    }

    /// Removes origins whose last heartbeat is strictly older than the
    /// liveness window. Returned ids are sorted.
    pub fn prune_stale(&self, now_ms: u64) -> Vec<String> {
        let mut table = self.table.write().unwrap();
        let mut stale: Vec<String> = table
            .origins
            .iter()
            .filter(|(_, e)| !self.is_live(e, now_ms))
            .map(|(id, _)| id.clone())
            .collect();
        stale.sort();
        for id in &stale {
            if let Some(entry) = table.origins.remove(id) {
                for prefix in entry.prefixes {
                    table.owners.remove(&prefix);
                }
            }
        }
        stale
    }

    pub fn stats(&self) -> RedirectorCounters {
        let table = self.table.read().unwrap();
        RedirectorCounters {
            origins: table.origins.len() as u64,
            prefixes: table.owners.len() as u64,
            locates_total: self.locates.load(Ordering::SeqCst),
            registrations_total: self.registrations.load(Ordering::SeqCst),
            active_connections: self.active.load(Ordering::SeqCst),
        }
    }

    fn handle_registration(&self, request: &Request, id: &str, now_ms: u64) -> Response {
        let Some(endpoint) = request.headers.get(REGISTER_ENDPOINT) else {
            return Response::empty(StatusCode::NotFound);
        };
        if check_endpoint(endpoint).is_err() {
            return Response::empty(StatusCode::NotFound);
        }
        let namespaces = match request.headers.get(REGISTER_NAMESPACES) {
            Some(list) => {
                let parsed: Result<Vec<_>, _> = list.split(',').map(ObjectPath::parse).collect();
                match parsed {
                    Ok(v) => v,
                    Err(_) => return Response::empty(StatusCode::NotFound),
                }
            }
            None => match self.known_origins.iter().find(|o| o.id == id) {
                Some(o) => o.namespaces.clone(),
                None => return Response::empty(StatusCode::NotFound),
            },
        };
        let spec = OriginSpec {
            id: id.to_owned(),
            endpoint: endpoint.to_owned(),
            root_dir: Default::default(),
            namespaces,
        };
        match self.register_origin(&spec, now_ms) {
            Ok(()) => Response::ok(serde_json::to_vec(&self.stats()).expect("serializes")),
            Err(_) => Response::empty(StatusCode::Forbidden),
        }
    }
}

impl Service for Redirector {
    fn handle(&self, request: Request, _client: &str) -> Reply {
        let now = self.clock.now_ms();
        let response = match request.method {
            Method::Locate => match &request.path {
                Some(path) => self.locate(path, now),
                None => Response::empty(StatusCode::NotFound),
            },
            Method::Stats => match request.headers.get(REGISTER_ID) {
                Some(id) => self.handle_registration(&request, id, now),
                None => Response::ok(serde_json::to_vec(&self.stats()).expect("serializes")),
            },
            Method::Get => Response::empty(StatusCode::NotFound),
        };
        response.into()
    }

    fn active_connections(&self) -> &AtomicU64 {
        &self.active
    }
}

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("redirector refused registration with {0}")]
    Refused(StatusCode),
}

/// Registers (or refreshes) `spec` with the redirector at `endpoint`.
pub fn register_remote(endpoint: &str, spec: &OriginSpec, timeout: Duration) -> Result<(), RegisterError> {
    let namespaces: Vec<&str> = spec.namespaces.iter().map(ObjectPath::as_str).collect();
    let request = Request::stats()
        .with_header(REGISTER_ID, spec.id.as_str())
        .with_header(REGISTER_ENDPOINT, spec.endpoint.as_str())
        .with_header(REGISTER_NAMESPACES, namespaces.join(","));
    let response = net::exchange(endpoint, &request, timeout)?;
    match response.code {
        StatusCode::Ok => Ok(()),
        code => Err(RegisterError::Refused(code)),
    }
}

/// A running redirector with a periodic pruning pass.
pub struct RedirectorServer {
    redirector: Arc<Redirector>,
    server: ServerHandle,
    stop: Arc<std::sync::atomic::AtomicBool>,
    pruner: Option<JoinHandle<()>>,
}

impl RedirectorServer {
    pub fn start(redirector: Arc<Redirector>, listener: TcpListener) -> io::Result<Self> {
        let server = net::serve(listener, "redirector", redirector.clone())?;
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let pruner = {
            let stop = stop.clone();
            let redirector = redirector.clone();
            thread::spawn(move || {
                let mut ticks = 0u64;
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(50));
                    ticks += 1;
                    if ticks * 50 >= redirector.window_ms {
                        ticks = 0;
                        redirector.prune_stale(redirector.clock.now_ms());
                    }
                }
            })
        };
        Ok(Self {
            redirector,
            server,
            stop,
            pruner: Some(pruner),
        })
    }

    pub fn redirector(&self) -> &Arc<Redirector> {
        &self.redirector
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.pruner.take() {
            let _ = t.join();
        }
        self.server.shutdown();
    }
}

impl Drop for RedirectorServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
