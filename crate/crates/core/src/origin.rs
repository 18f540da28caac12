//! Origin service: serves files from its root directory for the namespaces
//! it owns.

use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{authorize, SharedNamespaces};
use crate::clock::SharedClock;
use crate::model::{Component, ObjectPath, OriginSpec};
use crate::monitoring::{MonitorEmitter, Transfer, XferIds};
use crate::net::{self, Reply, ServerHandle, Service};
use crate::redirector;
use crate::wire::{Method, Request, Response, StatusCode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginCounters {
    pub requests_total: u64,
    pub bytes_served: u64,
    pub denied_total: u64,
    pub active_connections: u64,
}

#[derive(Debug, Error)]
pub enum OriginError {
    #[error("root_dir {path}: {source}")]
    RootDir { path: PathBuf, source: io::Error },
    #[error("root_dir {0} is not a directory")]
    NotADirectory(PathBuf),
}

pub struct Origin {
    spec: OriginSpec,
    root: PathBuf,
    namespaces: SharedNamespaces,
    monitor: Arc<MonitorEmitter>,
    ids: XferIds,
    clock: SharedClock,
    requests_total: AtomicU64,
    bytes_served: Arc<AtomicU64>,
    denied_total: AtomicU64,
    active: AtomicU64,
}

impl Origin {
    pub fn new(
        spec: OriginSpec,
        namespaces: SharedNamespaces,
        monitor: Arc<MonitorEmitter>,
        clock: SharedClock,
    ) -> Result<Self, OriginError> {
        let root = fs::canonicalize(&spec.root_dir).map_err(|source| OriginError::RootDir {
            path: spec.root_dir.clone(),
            source,
        })?;
        fs::read_dir(&root).map_err(|source| OriginError::RootDir {
            path: spec.root_dir.clone(),
            source,
        })?;
        if !root.is_dir() {
            return Err(OriginError::NotADirectory(spec.root_dir.clone()));
        }
        Ok(Self {
            ids: XferIds::new(&spec.id),
            spec,
            root,
            namespaces,
            monitor,
            clock,
            requests_total: AtomicU64::new(0),
            bytes_served: Arc::new(AtomicU64::new(0)),
            denied_total: AtomicU64::new(0),
            active: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &OriginSpec {
        &self.spec
    }

    pub fn stats(&self) -> OriginCounters {
        OriginCounters {
            requests_total: self.requests_total.load(Ordering::SeqCst),
            bytes_served: self.bytes_served.load(Ordering::SeqCst),
            denied_total: self.denied_total.load(Ordering::SeqCst),
            active_connections: self.active.load(Ordering::SeqCst),
        }
    }

    /// Maps an object path onto the root directory. Returns `None` for
    /// anything that is not a regular file strictly inside the root.
    fn locate_file(&self, path: &ObjectPath) -> Option<PathBuf> {
        let mut candidate = self.root.clone();
        candidate.extend(path.components());
        let resolved = fs::canonicalize(&candidate).ok()?;
        if !resolved.starts_with(&self.root) || !resolved.is_file() {
            return None;
        }
        Some(resolved)
    }

    fn deny(&self, code: StatusCode) -> Reply {
        self.denied_total.fetch_add(1, Ordering::SeqCst);
        Response::empty(code).into()
    }

    /// Handles one request. For a 200 the f-open record has been emitted and
    /// the returned reply closes the transfer once the body is written.
    pub fn handle_at(&self, request: &Request, client: &str, now_ms: u64) -> Reply {
        match request.method {
            Method::Stats => {
                let body = serde_json::to_vec(&self.stats()).expect("counters serialize");
                return Response::ok(body).into();
            }
            Method::Locate => {
                self.requests_total.fetch_add(1, Ordering::SeqCst);
                return Response::empty(StatusCode::NotFound).into();
            }
            Method::Get => {}
        }
        self.requests_total.fetch_add(1, Ordering::SeqCst);
        let Some(path) = request.path.as_ref() else {
            return Response::empty(StatusCode::NotFound).into();
        };
        let Some(namespace) = self.namespaces.resolve(path) else {
            return Response::empty(StatusCode::NotFound).into();
        };
        if !self.spec.namespaces.contains(&namespace.prefix) {
            return Response::empty(StatusCode::NotFound).into();
        }
        if let Err(code) = authorize(request, &namespace, path, now_ms / 1000) {
            return self.deny(code);
        }
        let Some(file) = self.locate_file(path) else {
            return Response::empty(StatusCode::NotFound).into();
        };

        let transfer = Transfer::open(
            &self.monitor,
            self.ids.next(),
            &self.spec.id,
            Component::Origin,
            path,
            client,
            now_ms,
        );
        match fs::read(&file) {
            Ok(body) => {
                let monitor = self.monitor.clone();
                let clock = self.clock.clone();
                let served = self.bytes_served.clone();
                Reply {
                    response: Response::ok(body),
                    on_sent: Some(Box::new(move |sent| {
                        served.fetch_add(sent, Ordering::SeqCst);
                        transfer.close(&monitor, sent, clock.now_ms());
                    })),
                }
            }
            Err(_) => {
                transfer.close(&self.monitor, 0, self.clock.now_ms());
                Response::empty(StatusCode::InternalError).into()
            }
        }
    }

    /// Request handling without a socket: the whole body counts as sent.
    pub fn serve_request(&self, request: &Request, now_ms: u64) -> Response {
        let Reply { response, on_sent } = self.handle_at(request, "local", now_ms);
        if let Some(done) = on_sent {
            done(response.body.len() as u64);
        }
        response
    }
}

impl Service for Origin {
    fn handle(&self, request: Request, client: &str) -> Reply {
        self.handle_at(&request, client, self.clock.now_ms())
    }

    fn active_connections(&self) -> &AtomicU64 {
        &self.active
    }
}

/// A running origin: accept loop plus heartbeat registration with the
/// redirector.
pub struct OriginServer {
    origin: Arc<Origin>,
    server: ServerHandle,
    stop: Arc<AtomicBool>,
    heartbeat: Option<JoinHandle<()>>,
}

impl OriginServer {
    pub fn start(
        origin: Arc<Origin>,
        listener: TcpListener,
        redirector: Option<String>,
        heartbeat_every: Duration,
    ) -> io::Result<Self> {
        let server = net::serve(listener, &origin.spec.id, origin.clone())?;
        let stop = Arc::new(AtomicBool::new(false));
        let heartbeat = redirector.map(|endpoint| {
            let stop = stop.clone();
            let spec = origin.spec.clone();
            // Register once synchronously so the origin is routable on return.
            let _ = redirector::register_remote(&endpoint, &spec, net::DEFAULT_TIMEOUT);
            thread::spawn(move || {
                let tick = Duration::from_millis(50);
                let mut waited = Duration::ZERO;
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(tick);
                    waited += tick;
                    if waited >= heartbeat_every {
                        waited = Duration::ZERO;
                        let _ = redirector::register_remote(&endpoint, &spec, net::DEFAULT_TIMEOUT);
                    }
                }
            })
        });
        Ok(Self {
            origin,
            server,
            stop,
            heartbeat,
        })
    }

    pub fn origin(&self) -> &Arc<Origin> {
        &self.origin
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.heartbeat.take() {
            let _ = t.join();
        }
        self.server.shutdown();
    }
}

impl Drop for OriginServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
