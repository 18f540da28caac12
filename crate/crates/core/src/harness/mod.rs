//! In-process federation for tests and demos: every service on a loopback
//! port, seeded data, scripted workloads and injectable faults.

mod fault;
mod workload;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use thiserror::Error;

use crate::access::SharedNamespaces;
use crate::cache::{Cache, CacheServer};
use crate::clock::{self, SharedClock};
use crate::health::{CheckId, CheckSpec, SuiteConfig};
use crate::model::{
    CacheSpec, FederationTopology, MonitoringSpec, NamespaceSpec, ObjectPath, OriginSpec, TopologyError,
};
use crate::monitoring::{Backoff, Collector, CollectorServer, MonitorEmitter, Shoveler, ShovelerConfig};
use crate::origin::{Origin, OriginError, OriginServer};
use crate::redirector::{Redirector, RedirectorServer, HEARTBEAT_INTERVAL};

pub use fault::{Fault, FaultError};
pub use workload::{zipf_script, Trace, TraceEntry, WorkloadStep};

pub const PROBE_PUBLIC: &str = "/_probe";
pub const PROBE_PRIVATE: &str = "/_probe/private";
pub const PROBE_PUBLIC_OBJECT: &str = "/_probe/public.bin";
pub const PROBE_PRIVATE_OBJECT: &str = "/_probe/private/private.bin";
const PROBE_PUBLIC_SIZE: usize = 4 << 20;
const PROBE_PRIVATE_SIZE: usize = 64 << 10;
/// Shoveler queue bound inside the harness; small so queue faults are cheap.
pub const HARNESS_QUEUE_BOUND: usize = 256;
const OBJECTS_PER_NAMESPACE: usize = 12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("origin: {0}")]
    Origin(#[from] OriginError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Secret of a protected namespace in [`minimal_topology`].
pub fn demo_secret(prefix: &str) -> Vec<u8> {
    format!("secret-for-{prefix}").into_bytes()
}

/// One origin, one cache, redirector and monitoring pipeline; the probe
/// namespaces plus five user namespaces of which `/ligo` is protected.
/// Endpoints and directories are placeholders the harness replaces.
pub fn minimal_topology() -> FederationTopology {
    let p = |s: &str| ObjectPath::parse(s).expect("static path");
    let prefixes = [PROBE_PUBLIC, PROBE_PRIVATE, "/ligo", "/nova", "/dune", "/minerva", "/uboone"];
    let namespaces = prefixes
        .iter()
        .map(|s| match *s {
            PROBE_PRIVATE | "/ligo" => NamespaceSpec::protected(p(s), demo_secret(s)),
            _ => NamespaceSpec::public(p(s)),
        })
        .collect();
    FederationTopology {
        origins: vec![OriginSpec {
            id: "origin-1".into(),
            endpoint: "127.0.0.1:0".into(),
            root_dir: "origin-1".into(),
            namespaces: prefixes.iter().map(|s| p(s)).collect(),
        }],
        caches: vec![CacheSpec {
            id: "cache-1".into(),
            endpoint: "127.0.0.1:0".into(),
            latitude: 40.82,
            longitude: -96.70,
            capacity_bytes: 256 << 20,
            disk_dir: "cache-1".into(),
        }],
        redirector_endpoint: "127.0.0.1:0".into(),
        namespaces,
        monitoring: Some(MonitoringSpec {
            shoveler_udp: "127.0.0.1:0".into(),
            shoveler_admin: "127.0.0.1:0".into(),
            collector: "127.0.0.1:0".into(),
        }),
    }
}

fn deterministic_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    buf
}

fn write_object(root: &Path, path: &ObjectPath, body: &[u8]) -> io::Result<()> {
    let file = root.join(path.as_str().trim_start_matches('/'));
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(file, body)
}

struct OriginSlot {
    origin: Arc<Origin>,
    addr: SocketAddr,
    server: Option<OriginServer>,
}

struct CacheSlot {
    cache: Arc<Cache>,
    addr: SocketAddr,
    server: Option<CacheServer>,
}

/// A running federation. Dropping it stops every service and removes its
/// directories.
pub struct Federation {
    topology: FederationTopology,
    seed: u64,
    namespaces: SharedNamespaces,
    redirector: Arc<Redirector>,
    redirector_addr: SocketAddr,
    redirector_server: Option<RedirectorServer>,
    origins: Vec<OriginSlot>,
    caches: Vec<CacheSlot>,
    shoveler: Shoveler,
    collector: CollectorServer,
    emitted: Arc<AtomicU64>,
    catalog: Vec<(ObjectPath, u64)>,
    probe_digests: BTreeMap<String, String>,
    faults: fault::ActiveFaults,
    clock: SharedClock,
    dir: Option<TempDir>,
}

fn bind_tcp() -> io::Result<(TcpListener, SocketAddr)> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let a = l.local_addr()?;
    Ok((l, a))
}

impl Federation {
    /// Starts every service of `topology` on fresh loopback ports. Data and
    /// cache directories live in a private temporary directory; object
    /// contents are drawn from `seed`.
    pub fn spawn(topology: FederationTopology, seed: u64) -> Result<Self, HarnessError> {
        topology.validate()?;
        let mut topology = topology;
        let dir = tempfile::Builder::new().prefix("minifed-").tempdir()?;
        let clock = clock::system();

        // Bind everything first so the topology can carry real endpoints.
        let (redirector_listener, redirector_addr) = bind_tcp()?;
        let mut origin_listeners = Vec::new();
        for origin in &mut topology.origins {
            let (l, a) = bind_tcp()?;
            origin.endpoint = a.to_string();
            origin.root_dir = dir.path().join("origins").join(&origin.id);
            origin_listeners.push(l);
        }
        let mut cache_listeners = Vec::new();
        for cache in &mut topology.caches {
            let (l, a) = bind_tcp()?;
            cache.endpoint = a.to_string();
            cache.disk_dir = dir.path().join("caches").join(&cache.id);
            cache_listeners.push(l);
        }
        let (collector_listener, collector_addr) = bind_tcp()?;
        let (admin_listener, admin_addr) = bind_tcp()?;
        let udp = UdpSocket::bind("127.0.0.1:0")?;
        let udp_addr = udp.local_addr()?;
        topology.redirector_endpoint = redirector_addr.to_string();
        topology.monitoring = Some(MonitoringSpec {
            shoveler_udp: udp_addr.to_string(),
            shoveler_admin: admin_addr.to_string(),
            collector: collector_addr.to_string(),
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (catalog, probe_digests) = seed_origins(&topology, &mut rng)?;

        let collector = CollectorServer::start(
            Arc::new(Collector::open(dir.path().join("collector").join("records.log"))?),
            collector_listener,
        )?;
        let shoveler = Shoveler::start(
            udp,
            admin_listener,
            ShovelerConfig {
                queue_bound: HARNESS_QUEUE_BOUND,
                backoff: Backoff::new(Duration::from_millis(50), Duration::from_millis(500)),
                ack_timeout: Duration::from_millis(500),
                ..ShovelerConfig::new(collector_addr.to_string())
            },
        )?;

        let emitted = Arc::new(AtomicU64::new(0));
        let emitter = || -> io::Result<Arc<MonitorEmitter>> {
            Ok(Arc::new(MonitorEmitter::udp(udp_addr)?.with_tally(emitted.clone())))
        };
        let namespaces = SharedNamespaces::new(topology.namespace_table());

        let redirector = Arc::new(Redirector::new(topology.origins.clone(), clock.clone()));
        let redirector_server = RedirectorServer::start(redirector.clone(), redirector_listener)?;

        let mut origins = Vec::new();
        for (spec, listener) in topology.origins.iter().zip(origin_listeners) {
            let addr = listener.local_addr()?;
            let origin = Arc::new(Origin::new(spec.clone(), namespaces.clone(), emitter()?, clock.clone())?);
            let server = OriginServer::start(
                origin.clone(),
                listener,
                Some(topology.redirector_endpoint.clone()),
                HEARTBEAT_INTERVAL,
            )?;
            origins.push(OriginSlot {
                origin,
                addr,
                server: Some(server),
            });
        }
        let mut caches = Vec::new();
        for (spec, listener) in topology.caches.iter().zip(cache_listeners) {
            let addr = listener.local_addr()?;
            let cache = Arc::new(Cache::open(
                spec.clone(),
                topology.redirector_endpoint.clone(),
                namespaces.clone(),
                emitter()?,
                clock.clone(),
            )?);
            let server = CacheServer::start(cache.clone(), listener)?;
            caches.push(CacheSlot {
                cache,
                addr,
                server: Some(server),
            });
        }

        Ok(Self {
            topology,
            seed,
            namespaces,
            redirector,
            redirector_addr,
            redirector_server: Some(redirector_server),
            origins,
            caches,
            shoveler,
            collector,
            emitted,
            catalog,
            probe_digests,
            faults: fault::ActiveFaults::default(),
            clock,
            dir: Some(dir),
        })
    }

    pub fn spawn_minimal(seed: u64) -> Result<Self, HarnessError> {
        Self::spawn(minimal_topology(), seed)
    }

    /// The topology with the endpoints and directories actually in use.
    pub fn topology(&self) -> &FederationTopology {
        &self.topology
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> &Path {
        self.dir.as_ref().expect("present until drop").path()
    }

    /// User objects seeded into the origins, with sizes.
    pub fn catalog(&self) -> &[(ObjectPath, u64)] {
        &self.catalog
    }

    pub fn origin_file(&self, path: &ObjectPath) -> Option<PathBuf> {
        let owner = self
            .topology
            .origins
            .iter()
            .filter(|o| o.namespaces.iter().any(|ns| path.is_under(ns)))
            .max_by_key(|o| {
                o.namespaces
                    .iter()
                    .filter(|ns| path.is_under(ns))
                    .map(|ns| ns.as_str().len())
                    .max()
            })?;
        Some(owner.root_dir.join(path.as_str().trim_start_matches('/')))
    }

    pub fn collector_log(&self) -> PathBuf {
        self.collector.collector().path().to_path_buf()
    }

    pub fn collector(&self) -> &CollectorServer {
        &self.collector
    }

    pub fn shoveler(&self) -> &Shoveler {
        &self.shoveler
    }

    pub fn cache(&self, id: &str) -> Option<&Arc<Cache>> {
        self.caches.iter().find(|c| c.cache.spec().id == id).map(|c| &c.cache)
    }

    pub fn origin(&self, id: &str) -> Option<&Arc<Origin>> {
        self.origins.iter().find(|o| o.origin.spec().id == id).map(|o| &o.origin)
    }

    pub fn redirector(&self) -> &Arc<Redirector> {
        &self.redirector
    }

    pub fn namespaces(&self) -> &SharedNamespaces {
        &self.namespaces
    }

    /// Records handed to the shoveler by federation services so far.
    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::SeqCst)
    }

    /// Waits until every response has finished, every emitted record has
    /// reached the shoveler, and the shoveler queue is empty.
    pub fn settle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut stable = 0;
        while Instant::now() < deadline {
            let idle = self.caches.iter().all(|c| c.cache.stats().active_connections == 0)
                && self.origins.iter().all(|o| o.origin.stats().active_connections == 0);
            let c = self.shoveler.counters();
            if idle && c.received >= self.emitted() && c.queue_depth == 0 {
                stable += 1;
                if stable >= 3 {
                    return true;
                }
            } else {
                stable = 0;
            }
            thread::sleep(Duration::from_millis(10));
        }
        false
    }

    /// Health suite covering every check and every service.
    pub fn default_suite(&self) -> SuiteConfig {
        let public = ObjectPath::parse(PROBE_PUBLIC_OBJECT).expect("static path");
        let private = ObjectPath::parse(PROBE_PRIVATE_OBJECT).expect("static path");
        let first_cache = &self.topology.caches[0];
        let mut checks = Vec::new();
        for cache in &self.topology.caches {
            checks.push(CheckSpec::new(CheckId::AuthAccess, &cache.id).with_path(private.clone()));
            checks.push(CheckSpec::new(CheckId::UnauthDenied, &cache.id).with_path(private.clone()));
            checks.push(CheckSpec::new(CheckId::TransferRate, &cache.id).with_path(public.clone()));
        }
        checks.push(CheckSpec::new(CheckId::ShovelerThroughput, "shoveler"));
        checks.push(CheckSpec::new(CheckId::ShovelerQueue, "shoveler"));
        for (probe, check, path) in [
            (PROBE_PUBLIC, CheckId::CopyPublic, &public),
            (PROBE_PRIVATE, CheckId::CopyPrivate, &private),
        ] {
            let prefix = ObjectPath::parse(probe).expect("static path");
            if let Some(owner) = self.topology.owner_of(&prefix) {
                checks.push(
                    CheckSpec::new(check, &owner.id)
                        .with_path(path.clone())
                        .with_sha256(self.probe_digests[path.as_str()].clone())
                        .via(&first_cache.id),
                );
            }
        }
        for id in self
            .topology
            .caches
            .iter()
            .map(|c| &c.id)
            .chain(self.topology.origins.iter().map(|o| &o.id))
        {
            checks.push(CheckSpec::new(CheckId::ServiceLoad, id));
        }
        checks.push(CheckSpec::new(CheckId::RedirectorAlive, "redirector").with_path(public));
        SuiteConfig {
            client_location: format!("{},{}", first_cache.latitude, first_cache.longitude),
            checks,
            ..SuiteConfig::default()
        }
    }

    /// Stops every service. Also done on drop.
    pub fn teardown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        for c in &mut self.caches {
            if let Some(mut s) = c.server.take() {
                s.shutdown();
            }
        }
        for o in &mut self.origins {
            if let Some(mut s) = o.server.take() {
                s.shutdown();
            }
        }
        if let Some(mut s) = self.redirector_server.take() {
            s.shutdown();
        }
        self.shoveler.shutdown();
        self.collector.shutdown();
        if let Some(dir) = self.dir.take() {
            let _ = dir.close();
        }
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        self.stop_all();
    }
}

type Seeded = (Vec<(ObjectPath, u64)>, BTreeMap<String, String>);

fn seed_origins(topology: &FederationTopology, rng: &mut ChaCha8Rng) -> Result<Seeded, HarnessError> {
    let mut catalog = Vec::new();
    let mut digests = BTreeMap::new();
    let probes = [
        (PROBE_PUBLIC, PROBE_PUBLIC_OBJECT, PROBE_PUBLIC_SIZE),
        (PROBE_PRIVATE, PROBE_PRIVATE_OBJECT, PROBE_PRIVATE_SIZE),
    ];
    for origin in &topology.origins {
        fs::create_dir_all(&origin.root_dir)?;
        let mut prefixes = origin.namespaces.clone();
        prefixes.sort();
        for prefix in &prefixes {
            if let Some((_, object, size)) = probes.iter().find(|(p, _, _)| *p == prefix.as_str()) {
                let path = ObjectPath::parse(object).expect("static path");
                let body = deterministic_bytes(rng, *size);
                digests.insert(object.to_string(), hex::encode(Sha256::digest(&body)));
                write_object(&origin.root_dir, &path, &body)?;
                continue;
            }
            for i in 0..OBJECTS_PER_NAMESPACE {
                let path = prefix.join(&format!("obj-{i:02}.bin")).expect("valid name");
                let size = rng.gen_range(1usize << 10..=64 << 10);
                let body = deterministic_bytes(rng, size);
                write_object(&origin.root_dir, &path, &body)?;
                catalog.push((path, size as u64));
            }
        }
    }
    Ok((catalog, digests))
}
