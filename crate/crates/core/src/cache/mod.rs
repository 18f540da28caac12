//! Disk cache in front of the origins.
//!
//! Hits are served from `disk_dir`; misses are resolved through the
//! redirector and fetched from the owning origin, then admitted under LRU
//! capacity control. Concurrent misses for one path share a single origin
//! fetch.

mod lru;

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use lru::{AdmitError, CacheEntry, LruIndex};

use crate::access::{authorize, SharedNamespaces};
use crate::clock::SharedClock;
use crate::model::{CacheSpec, Component, Event, MonitorRecord, ObjectPath};
use crate::monitoring::{MonitorEmitter, Transfer, XferIds};
use crate::net::{self, Reply, ServerHandle, Service};
use crate::wire::{Method, Request, Response, StatusCode};

const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub requests_total: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_served: u64,
    pub bytes_cached: u64,
    pub active_connections: u64,
}

impl CacheCounters {
    pub fn hit_ratio(&self) -> Option<f64> {
        let outcomes = self.hits + self.misses;
        (outcomes > 0).then(|| self.hits as f64 / outcomes as f64)
    }
}

type FetchResult = Result<Arc<Vec<u8>>, StatusCode>;

#[derive(Default)]
struct Inflight {
    result: Mutex<Option<FetchResult>>,
    done: Condvar,
}

impl Inflight {
    fn publish(&self, result: FetchResult) {
        *self.result.lock().unwrap() = Some(result);
        self.done.notify_all();
    }

    fn wait(&self) -> FetchResult {
        let mut slot = self.result.lock().unwrap();
        while slot.is_none() {
            slot = self.done.wait(slot).unwrap();
        }
        slot.clone().unwrap()
    }
}

pub struct Cache {
    spec: CacheSpec,
    redirector: String,
    namespaces: SharedNamespaces,
    monitor: Arc<MonitorEmitter>,
    ids: XferIds,
    clock: SharedClock,
    upstream_timeout: Duration,
    index: Mutex<LruIndex>,
    inflight: Mutex<HashMap<ObjectPath, Arc<Inflight>>>,
    requests_total: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    bytes_served: Arc<AtomicU64>,
    origin_fetches: AtomicU64,
    active: AtomicU64,
}

enum Outcome {
    Hit(Arc<Vec<u8>>),
    Miss(Arc<Vec<u8>>),
}

impl Cache {
    /// Opens the cache, recovering entries already present in `disk_dir`.
    pub fn open(
        spec: CacheSpec,
        redirector: String,
        namespaces: SharedNamespaces,
        monitor: Arc<MonitorEmitter>,
        clock: SharedClock,
    ) -> io::Result<Self> {
        fs::create_dir_all(&spec.disk_dir)?;
        let cache = Self {
            ids: XferIds::new(&spec.id),
            index: Mutex::new(LruIndex::new(spec.capacity_bytes)),
            spec,
            redirector,
            namespaces,
            monitor,
            clock,
            upstream_timeout: net::DEFAULT_TIMEOUT,
            inflight: Mutex::new(HashMap::new()),
            requests_total: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            bytes_served: Arc::new(AtomicU64::new(0)),
            origin_fetches: AtomicU64::new(0),
            active: AtomicU64::new(0),
        };
        cache.recover()?;
        Ok(cache)
    }

    pub fn with_upstream_timeout(mut self, timeout: Duration) -> Self {
        self.upstream_timeout = timeout;
        self
    }

    pub fn spec(&self) -> &CacheSpec {
        &self.spec
    }

    fn recover(&self) -> io::Result<()> {
        let mut found = Vec::new();
        scan_dir(&self.spec.disk_dir, &self.spec.disk_dir, &mut found)?;
        found.sort();
        let now = self.clock.now_ms();
        let mut index = self.index.lock().unwrap();
        for (path, file, size) in found {
            match index.admit(path, size, now, file.clone()) {
                Ok(evicted) => {
                    for e in evicted {
                        let _ = fs::remove_file(&e.disk_file);
                    }
                }
                Err(_) => {
                    let _ = fs::remove_file(&file);
                }
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> CacheCounters {
        let bytes_cached = self.index.lock().unwrap().used();
        CacheCounters {
            requests_total: self.requests_total.load(Ordering::SeqCst),
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            evictions: self.evictions.load(Ordering::SeqCst),
            bytes_served: self.bytes_served.load(Ordering::SeqCst),
            bytes_cached,
            active_connections: self.active.load(Ordering::SeqCst),
        }
    }

    /// Number of GETs this cache has issued to origins.
    pub fn origin_fetches(&self) -> u64 {
        self.origin_fetches.load(Ordering::SeqCst)
    }

    pub fn entries(&self) -> Vec<CacheEntry> {
        self.index
            .lock()
            .unwrap()
            .entries_by_recency()
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn contains(&self, path: &ObjectPath) -> bool {
        self.index.lock().unwrap().contains(path)
    }

    fn disk_file(&self, path: &ObjectPath) -> PathBuf {
        let mut file = self.spec.disk_dir.clone();
        file.extend(path.components());
        file
    }

    fn emit_g(&self, event: Event, path: &ObjectPath, bytes: u64, client: &str, xfer_id: &str, now_ms: u64) {
        self.monitor.emit(&MonitorRecord::new(
            event,
            now_ms,
            &self.spec.id,
            Component::Cache,
            path,
            bytes,
            client,
            xfer_id,
        ));
    }

    /// Admits `body` under `path`, writing it to disk. Returns the evicted
    /// paths; refuses objects larger than the whole cache.
    pub fn admit(&self, path: &ObjectPath, body: &[u8], now_ms: u64) -> Result<Vec<ObjectPath>, AdmitError> {
        let file = self.disk_file(path);
        let mut index = self.index.lock().unwrap();
        let evicted = index.admit(path.clone(), body.len() as u64, now_ms, file.clone())?;
        for entry in &evicted {
            let _ = fs::remove_file(&entry.disk_file);
            self.evictions.fetch_add(1, Ordering::SeqCst);
            self.emit_g(Event::Evict, &entry.path, entry.size_bytes, "", &self.ids.next(), now_ms);
        }
        if write_atomic(&self.spec.disk_dir, &file, body).is_err() {
            index.remove(path);
        }
        Ok(evicted.into_iter().map(|e| e.path).collect())
    }

    fn read_hit(&self, path: &ObjectPath, now_ms: u64) -> Option<Arc<Vec<u8>>> {
        let (file, size) = {
            let mut index = self.index.lock().unwrap();
            let entry = index.touch(path, now_ms)?;
            (entry.disk_file.clone(), entry.size_bytes)
        };
        match fs::read(&file) {
            Ok(body) if body.len() as u64 == size => Some(Arc::new(body)),
            _ => {
                let mut index = self.index.lock().unwrap();
                if index.get(path).is_some_and(|e| e.disk_file == file) {
                    index.remove(path);
                }
                None
            }
        }
    }

    fn fetch_upstream(&self, request: &Request, path: &ObjectPath) -> FetchResult {
        let located = net::exchange(&self.redirector, &Request::locate(path.clone()), self.upstream_timeout)
            .map_err(|_| StatusCode::InternalError)?;
        let origin = match located.code {
            StatusCode::Found => located.location().ok_or(StatusCode::InternalError)?.to_owned(),
            StatusCode::NotFound => return Err(StatusCode::NotFound),
            _ => return Err(StatusCode::InternalError),
        };
        let mut upstream = Request::get(path.clone());
        if let Some(auth) = request.headers.get("Authorization") {
            upstream.headers.push("Authorization", auth);
        }
        self.origin_fetches.fetch_add(1, Ordering::SeqCst);
        let response = net::exchange(&origin, &upstream, self.upstream_timeout)
            .map_err(|_| StatusCode::InternalError)?;
        match response.code {
            StatusCode::Ok => Ok(Arc::new(response.body)),
            code if code.is_client_error() => Err(code),
            _ => Err(StatusCode::InternalError),
        }
    }

    /// Fetches a missing object, sharing the work with concurrent requests
    /// for the same path.
    fn fetch_coalesced(&self, request: &Request, path: &ObjectPath, now_ms: u64) -> Result<Outcome, StatusCode> {
        let (slot, leader) = {
            let mut inflight = self.inflight.lock().unwrap();
            match inflight.get(path) {
                Some(slot) => (slot.clone(), false),
                None => {
                    let slot = Arc::new(Inflight::default());
                    inflight.insert(path.clone(), slot.clone());
                    (slot, true)
                }
            }
        };
        if !leader {
            return slot.wait().map(Outcome::Miss);
        }
        // A previous leader may have admitted the object after our hit check.
        let result = match self.read_hit(path, now_ms) {
            Some(body) => {
                slot.publish(Ok(body.clone()));
                self.inflight.lock().unwrap().remove(path);
                return Ok(Outcome::Hit(body));
            }
            None => self.fetch_upstream(request, path),
        };
        if let Ok(body) = &result {
            // Objects larger than the cache are served without admission.
            let _ = self.admit(path, body, self.clock.now_ms());
        }
        slot.publish(result.clone());
        self.inflight.lock().unwrap().remove(path);
        result.map(Outcome::Miss)
    }

    pub fn handle_get(&self, request: &Request, client: &str, now_ms: u64) -> Reply {
        self.requests_total.fetch_add(1, Ordering::SeqCst);
        let Some(path) = request.path.as_ref() else {
            return Response::empty(StatusCode::NotFound).into();
        };
        let Some(namespace) = self.namespaces.resolve(path) else {
            return Response::empty(StatusCode::NotFound).into();
        };
        if let Err(code) = authorize(request, &namespace, path, now_ms / 1000) {
            return Response::empty(code).into();
        }
        let outcome = match self.read_hit(path, now_ms) {
            Some(body) => Outcome::Hit(body),
            None => match self.fetch_coalesced(request, path, now_ms) {
                Ok(outcome) => outcome,
                Err(code) => return Response::empty(code).into(),
            },
        };
        let (body, event, label) = match outcome {
            Outcome::Hit(body) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                (body, Event::Hit, "HIT")
            }
            Outcome::Miss(body) => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                (body, Event::Miss, "MISS")
            }
        };
        let xfer_id = self.ids.next();
        let now = self.clock.now_ms();
        self.emit_g(event, path, body.len() as u64, client, &xfer_id, now);
        let transfer = Transfer::open(&self.monitor, xfer_id, &self.spec.id, Component::Cache, path, client, now);
        let monitor = self.monitor.clone();
        let clock = self.clock.clone();
        let served = self.bytes_served.clone();
        let body = Arc::try_unwrap(body).unwrap_or_else(|shared| (*shared).clone());
        Reply {
            response: Response::ok(body).with_header("X-Cache", label),
            on_sent: Some(Box::new(move |sent| {
                served.fetch_add(sent, Ordering::SeqCst);
                transfer.close(&monitor, sent, clock.now_ms());
            })),
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

    fn handle_at(&self, request: &Request, client: &str, now_ms: u64) -> Reply {
        match request.method {
            Method::Get => self.handle_get(request, client, now_ms),
            Method::Stats => Response::ok(serde_json::to_vec(&self.stats()).expect("serializes")).into(),
            Method::Locate => Response::empty(StatusCode::NotFound).into(),
        }
    }
}

impl Service for Cache {
    fn handle(&self, request: Request, client: &str) -> Reply {
        self.handle_at(&request, client, self.clock.now_ms())
    }

    fn active_connections(&self) -> &AtomicU64 {
        &self.active
    }
}

fn scan_dir(root: &Path, dir: &Path, found: &mut Vec<(ObjectPath, PathBuf, u64)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let file_type = entry.file_type()?;
        let file = entry.path();
        if file_type.is_dir() {
            scan_dir(root, &file, found)?;
            continue;
        }
        if !file_type.is_file() {
            continue;
        }
        if entry.file_name().to_string_lossy().starts_with(TMP_PREFIX) {
            let _ = fs::remove_file(&file);
            continue;
        }
        let rel = file.strip_prefix(root).expect("scan stays under root");
        let joined: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
        match ObjectPath::parse(&format!("/{}", joined.join("/"))) {
            Ok(path) => found.push((path, file.clone(), entry.metadata()?.len())),
            Err(_) => {
                let _ = fs::remove_file(&file);
            }
        }
    }
    Ok(())
}

fn write_atomic(root: &Path, file: &Path, body: &[u8]) -> io::Result<()> {
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = root.join(format!("{TMP_PREFIX}{:016x}", rand::random::<u64>()));
    fs::write(&tmp, body)?;
    fs::rename(&tmp, file).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub struct CacheServer {
    cache: Arc<Cache>,
    server: ServerHandle,
}

impl CacheServer {
    pub fn start(cache: Arc<Cache>, listener: TcpListener) -> io::Result<Self> {
        let server = net::serve(listener, &cache.spec.id.clone(), cache.clone())?;
        Ok(Self { cache, server })
    }

    pub fn cache(&self) -> &Arc<Cache> {
        &self.cache
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock;
    use crate::model::{NamespaceSpec, NamespaceTable};

    fn p(s: &str) -> ObjectPath {
        ObjectPath::parse(s).unwrap()
    }

    fn open(dir: &Path, capacity: u64, monitor: Arc<MonitorEmitter>) -> Cache {
        let spec = CacheSpec {
            id: "cache-1".into(),
            endpoint: "127.0.0.1:1".into(),
            latitude: 0.0,
            longitude: 0.0,
            capacity_bytes: capacity,
            disk_dir: dir.to_path_buf(),
        };
        let table = NamespaceTable::new(vec![
            NamespaceSpec::protected(p("/ligo"), b"k".to_vec()),
            NamespaceSpec::public(p("/nova")),
        ]);
        // Port 9 on loopback: nothing listens, so upstream calls fail fast.
        Cache::open(spec, "127.0.0.1:9".into(), SharedNamespaces::new(table), monitor, clock::system())
            .unwrap()
            .with_upstream_timeout(Duration::from_millis(200))
    }

    #[test]
    fn fresh_cache_has_zero_counters() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 100, Arc::new(MonitorEmitter::disabled()));
        assert_eq!(cache.stats(), CacheCounters::default());
        assert_eq!(cache.stats().hit_ratio(), None);
    }

    #[test]
    fn admitted_objects_are_served_as_hits() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = Arc::new(MonitorEmitter::memory());
        let cache = open(dir.path(), 100, monitor.clone());
        cache.admit(&p("/nova/f"), b"0123456789", 1).unwrap();
        assert_eq!(fs::read(dir.path().join("nova/f")).unwrap(), b"0123456789");

        let resp = cache.serve_request(&Request::get(p("/nova/f")), 2);
        assert_eq!(resp.code, StatusCode::Ok);
        assert_eq!(resp.x_cache(), Some("HIT"));
        assert_eq!(resp.body, b"0123456789");
        let events: Vec<Event> = monitor.captured().iter().map(|r| r.event).collect();
        assert_eq!(events, [Event::Hit, Event::Open, Event::Close]);
        let stats = cache.stats();
        assert_eq!((stats.hits, stats.misses, stats.bytes_served, stats.bytes_cached), (1, 0, 10, 10));
    }

    #[test]
    fn eviction_removes_files_and_emits_records() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = Arc::new(MonitorEmitter::memory());
        let cache = open(dir.path(), 100, monitor.clone());
        cache.admit(&p("/nova/a"), &[1; 60], 1).unwrap();
        cache.admit(&p("/nova/b"), &[2; 30], 2).unwrap();
        assert_eq!(cache.admit(&p("/nova/c"), &[3; 40], 3).unwrap(), [p("/nova/a")]);
        assert!(!dir.path().join("nova/a").exists());
        let evicts: Vec<_> = monitor.captured().into_iter().filter(|r| r.event == Event::Evict).collect();
        assert_eq!(evicts.len(), 1);
        assert_eq!(evicts[0].path, p("/nova/a"));
        assert_eq!(cache.stats().evictions, 1);
        assert!(cache.admit(&p("/nova/huge"), &[0; 101], 4).is_err());
    }

    #[test]
    fn unauthorized_requests_admit_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 100, Arc::new(MonitorEmitter::memory()));
        let resp = cache.serve_request(&Request::get(p("/ligo/a")), 1);
        assert_eq!(resp.code, StatusCode::Unauthorized);
        assert!(cache.entries().is_empty());
        let stats = cache.stats();
        assert_eq!((stats.requests_total, stats.hits, stats.misses), (1, 0, 0));
    }

    #[test]
    fn unreachable_redirector_is_internal_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 100, Arc::new(MonitorEmitter::disabled()));
        let resp = cache.serve_request(&Request::get(p("/nova/x")), 1);
        assert_eq!(resp.code, StatusCode::InternalError);
        assert_eq!(cache.serve_request(&Request::get(p("/other/x")), 1).code, StatusCode::NotFound);
    }

    #[test]
    fn entries_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = open(dir.path(), 100, Arc::new(MonitorEmitter::disabled()));
            cache.admit(&p("/nova/a"), &[1; 10], 1).unwrap();
            cache.admit(&p("/nova/sub/b"), &[2; 20], 2).unwrap();
        }
        fs::write(dir.path().join(".tmp-leftover"), b"partial").unwrap();
        let cache = open(dir.path(), 100, Arc::new(MonitorEmitter::disabled()));
        let paths: Vec<_> = cache.entries().into_iter().map(|e| e.path).collect();
        assert_eq!(paths, [p("/nova/a"), p("/nova/sub/b")]);
        assert_eq!(cache.stats().bytes_cached, 30);
        assert!(!dir.path().join(".tmp-leftover").exists());
        assert_eq!(cache.serve_request(&Request::get(p("/nova/sub/b")), 5).x_cache(), Some("HIT"));
    }
}
