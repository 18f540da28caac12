use std::collections::BTreeMap;
use std::net::UdpSocket;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::{CheckId, CheckResult, CheckSpec, Status, SuiteConfig, Thresholds};
use crate::client::{fetch_via, great_circle_km, nearest_caches, DeliveryError, FetchOptions, Fetched, GeoPoint};
use crate::model::{
    mint_token, resolve_namespace, CacheSpec, Component, Event, FederationTopology, MonitorRecord, NamespaceSpec,
    ObjectPath,
};
use crate::net;
use crate::wire::{encode_monitor_record, Request, StatusCode};

const PROBER: &str = "healthcheck";
const OUT_OF_SCOPE: &str = "read:/_healthcheck/out-of-scope";

/// Minimum rate for a client `distance_km` away from the cache.
pub fn rate_threshold(distance_km: f64, t: &Thresholds) -> f64 {
    if distance_km < t.near_km {
        t.near_rate
    } else if distance_km <= t.far_km {
        t.mid_rate
    } else {
        t.far_rate
    }
}

/// Below the threshold is WARN, below half of it CRIT.
pub fn rate_status(rate: f64, distance_km: f64, t: &Thresholds) -> Status {
    let min = rate_threshold(distance_km, t);
    if rate >= min {
        Status::Ok
    } else if rate >= min / 2.0 {
        Status::Warn
    } else {
        Status::Crit
    }
}

pub fn queue_status(depth: u64, capacity: u64, t: &Thresholds) -> Status {
    if capacity == 0 {
        return Status::Crit;
    }
    let fill = depth as f64 / capacity as f64;
    if fill >= t.queue_crit {
        Status::Crit
    } else if fill >= t.queue_warn {
        Status::Warn
    } else {
        Status::Ok
    }
}

struct Outcome {
    status: Status,
    metrics: BTreeMap<String, f64>,
    detail: String,
}

impl Outcome {
    fn new(status: Status, detail: impl Into<String>) -> Self {
        Self {
            status,
            metrics: BTreeMap::new(),
            detail: detail.into(),
        }
    }

    fn crit(detail: impl Into<String>) -> Self {
        Self::new(Status::Crit, detail)
    }

    fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_owned(), value);
        self
    }
}

pub(super) fn run(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> CheckResult {
    let started = Instant::now();
    let outcome = match spec.check {
        CheckId::AuthAccess => auth_access(spec, config, topology),
        CheckId::UnauthDenied => unauth_denied(spec, config, topology),
        CheckId::ShovelerThroughput => shoveler_throughput(config, topology),
        CheckId::ShovelerQueue => shoveler_queue(config, topology),
        CheckId::CopyPublic => copy(spec, config, topology, false),
        CheckId::CopyPrivate => copy(spec, config, topology, true),
        CheckId::TransferRate => transfer_rate(spec, config, topology),
        CheckId::ServiceLoad => service_load(spec, config, topology),
        CheckId::RedirectorAlive => redirector_alive(spec, config, topology),
    };
    CheckResult {
        check_id: spec.check,
        target: spec.target.clone(),
        status: outcome.status,
        metrics: outcome.metrics,
        detail: outcome.detail,
        duration_ms: started.elapsed().as_millis() as u64,
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn probe_path(spec: &CheckSpec) -> Result<&ObjectPath, Outcome> {
    spec.params
        .path
        .as_ref()
        .ok_or_else(|| Outcome::crit("no probe path configured"))
}

fn target_cache<'a>(spec: &CheckSpec, topology: &'a FederationTopology) -> Result<&'a CacheSpec, Outcome> {
    topology
        .cache(&spec.target)
        .ok_or_else(|| Outcome::crit(format!("unknown cache {:?}", spec.target)))
}

fn namespace_of<'a>(path: &ObjectPath, topology: &'a FederationTopology) -> Result<&'a NamespaceSpec, Outcome> {
    resolve_namespace(path.as_str(), &topology.namespaces)
        .ok()
        .flatten()
        .ok_or_else(|| Outcome::crit(format!("{path} is in no namespace")))
}

fn token_for(ns: &NamespaceSpec, scope: &str) -> Result<String, Outcome> {
    let secret = ns
        .secret
        .as_ref()
        .ok_or_else(|| Outcome::crit(format!("{} is public; a protected probe is required", ns.prefix)))?;
    mint_token(PROBER, &[scope], now_secs() + 600, secret.as_bytes())
        .map_err(|e| Outcome::crit(format!("cannot mint token: {e}")))
}

fn valid_token(ns: &NamespaceSpec) -> Result<String, Outcome> {
    token_for(ns, &format!("read:{}", ns.prefix))
}

fn describe(err: &DeliveryError) -> String {
    match err {
        DeliveryError::Exhausted(failures) => failures
            .iter()
            .map(|(_, why)| why.clone())
            .collect::<Vec<_>>()
            .join("; "),
        other => other.to_string(),
    }
}

fn status_code(result: &Result<Fetched, DeliveryError>) -> Option<u16> {
    match result {
        Ok(_) => Some(200),
        Err(e) => e.status().map(StatusCode::code),
    }
}

fn options(config: &SuiteConfig) -> FetchOptions {
    FetchOptions {
        timeout: config.timeout(),
    }
}

fn auth_access(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let attempt = || -> Result<Outcome, Outcome> {
        let cache = target_cache(spec, topology)?;
        let path = probe_path(spec)?;
        let token = valid_token(namespace_of(path, topology)?)?;
        Ok(match fetch_via(cache, path, Some(&token), options(config)) {
            Ok(f) => Outcome::new(Status::Ok, "token accepted").metric("bytes", f.bytes.len() as f64),
            Err(e) => {
                let out = Outcome::crit(format!("valid token not honoured: {}", describe(&e)));
                match status_code(&Err(e)) {
                    Some(code) => out.metric("status", f64::from(code)),
                    None => out,
                }
            }
        })
    };
    attempt().unwrap_or_else(|o| o)
}

fn unauth_denied(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let attempt = || -> Result<Outcome, Outcome> {
        let cache = target_cache(spec, topology)?;
        let path = probe_path(spec)?;
        let wrong = token_for(namespace_of(path, topology)?, OUT_OF_SCOPE)?;
        let anonymous = fetch_via(cache, path, None, options(config));
        let scoped = fetch_via(cache, path, Some(&wrong), options(config));
        let (a, s) = (status_code(&anonymous), status_code(&scoped));
        let mut out = match (a, s) {
            (Some(200), _) | (_, Some(200)) => Outcome::crit("protected probe delivered without valid authorization"),
            (Some(401), Some(403)) => Outcome::new(Status::Ok, "denied as expected"),
            (None, _) => Outcome::crit(format!("no answer: {}", describe(anonymous.as_ref().unwrap_err()))),
            (_, None) => Outcome::crit(format!("no answer: {}", describe(scoped.as_ref().unwrap_err()))),
            (Some(a), Some(s)) => Outcome::new(Status::Warn, format!("expected 401/403, got {a}/{s}")),
        };
        if let Some(a) = a {
            out = out.metric("anonymous_status", f64::from(a));
        }
        if let Some(s) = s {
            out = out.metric("out_of_scope_status", f64::from(s));
        }
        Ok(out)
    };
    attempt().unwrap_or_else(|o| o)
}

fn shoveler_stats(endpoint: &str, timeout: Duration) -> Result<serde_json::Value, String> {
    let response = net::exchange(endpoint, &Request::stats(), timeout).map_err(|e| e.to_string())?;
    if response.code != StatusCode::Ok {
        return Err(format!("STATS answered {}", response.code));
    }
    serde_json::from_slice(&response.body).map_err(|e| format!("STATS body: {e}"))
}

fn field(stats: &serde_json::Value, name: &str) -> Option<u64> {
    stats.get(name).and_then(|v| v.as_u64())
}

fn probe_datagram() -> Vec<u8> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    let path = ObjectPath::parse("/_probe/shoveler").expect("static path");
    let xfer = format!("probe-{}-{}", now.as_nanos(), rand::random::<u32>());
    let record = MonitorRecord::new(
        Event::Open,
        now.as_millis() as u64,
        PROBER,
        Component::Cache,
        &path,
        0,
        PROBER,
        &xfer,
    );
    encode_monitor_record(&record).expect("small record encodes")
}

fn shoveler_throughput(config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let Some(m) = &topology.monitoring else {
        return Outcome::crit("topology has no monitoring section");
    };
    let before = match shoveler_stats(&m.shoveler_admin, config.timeout()) {
        Ok(s) => field(&s, "received").unwrap_or(0),
        Err(e) => return Outcome::crit(e),
    };
    let sent = UdpSocket::bind("0.0.0.0:0").and_then(|s| s.send_to(&probe_datagram(), &m.shoveler_udp));
    if let Err(e) = sent {
        return Outcome::crit(format!("cannot send probe datagram: {e}"));
    }
    let deadline = Instant::now() + config.timeout().min(Duration::from_secs(2));
    loop {
        let after = match shoveler_stats(&m.shoveler_admin, config.timeout()) {
            Ok(s) => field(&s, "received").unwrap_or(0),
            Err(e) => return Outcome::crit(e),
        };
        if after > before {
            return Outcome::new(Status::Ok, "messages flowing")
                .metric("received", after as f64)
                .metric("delta", (after - before) as f64);
        }
        if Instant::now() >= deadline {
            return Outcome::new(Status::Warn, "received counter did not move")
                .metric("received", after as f64)
                .metric("delta", 0.0);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn shoveler_queue(config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let Some(m) = &topology.monitoring else {
        return Outcome::crit("topology has no monitoring section");
    };
    let stats = match shoveler_stats(&m.shoveler_admin, config.timeout()) {
        Ok(s) => s,
        Err(e) => return Outcome::crit(e),
    };
    let (Some(depth), Some(capacity)) = (field(&stats, "queue_depth"), field(&stats, "capacity")) else {
        return Outcome::crit("STATS lacks queue_depth/capacity");
    };
    let status = queue_status(depth, capacity, &config.thresholds);
    Outcome::new(status, format!("{depth} of {capacity} queued"))
        .metric("queue_depth", depth as f64)
        .metric("capacity", capacity as f64)
        .metric("dropped", field(&stats, "dropped").unwrap_or(0) as f64)
}

fn via_cache<'a>(
    spec: &CheckSpec,
    config: &SuiteConfig,
    topology: &'a FederationTopology,
) -> Result<&'a CacheSpec, Outcome> {
    let id = match &spec.params.via {
        Some(id) => id.clone(),
        None => {
            let at = config.client().map_err(Outcome::crit)?;
            nearest_caches(at, &topology.caches)
                .map_err(|e| Outcome::crit(e.to_string()))?
                .into_iter()
                .next()
                .ok_or_else(|| Outcome::crit("no caches"))?
        }
    };
    topology
        .cache(&id)
        .ok_or_else(|| Outcome::crit(format!("unknown cache {id:?}")))
}

fn copy(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology, private: bool) -> Outcome {
    let attempt = || -> Result<Outcome, Outcome> {
        let origin = topology
            .origin(&spec.target)
            .ok_or_else(|| Outcome::crit(format!("unknown origin {:?}", spec.target)))?;
        let path = probe_path(spec)?;
        let ns = namespace_of(path, topology)?;
        if !origin.namespaces.contains(&ns.prefix) {
            return Err(Outcome::crit(format!("{} is not served by {}", ns.prefix, origin.id)));
        }
        if ns.public == private {
            let want = if private { "protected" } else { "public" };
            return Err(Outcome::crit(format!("{} is not {want}", ns.prefix)));
        }
        let expected = spec
            .params
            .sha256
            .as_deref()
            .ok_or_else(|| Outcome::crit("no expected sha256 configured"))?;
        let cache = via_cache(spec, config, topology)?;
        let token = if private { Some(valid_token(ns)?) } else { None };
        let fetched = fetch_via(cache, path, token.as_deref(), options(config))
            .map_err(|e| Outcome::crit(format!("via {}: {}", cache.id, describe(&e))))?;
        let digest = hex::encode(Sha256::digest(&fetched.bytes));
        let out = if digest.eq_ignore_ascii_case(expected) {
            Outcome::new(Status::Ok, format!("digest matches via {}", cache.id))
        } else {
            Outcome::crit(format!("digest mismatch via {}: {digest}", cache.id))
        };
        Ok(out.metric("bytes", fetched.bytes.len() as f64))
    };
    attempt().unwrap_or_else(|o| o)
}

fn transfer_rate(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let attempt = || -> Result<Outcome, Outcome> {
        let cache = target_cache(spec, topology)?;
        let path = probe_path(spec)?;
        let ns = namespace_of(path, topology)?;
        let token = if ns.public { None } else { Some(valid_token(ns)?) };
        let at: GeoPoint = config.client().map_err(Outcome::crit)?;
        let there = GeoPoint::of_cache(cache).map_err(|e| Outcome::crit(e.to_string()))?;
        let distance = great_circle_km(at, there);
        let fetched = fetch_via(cache, path, token.as_deref(), options(config))
            .map_err(|e| Outcome::crit(describe(&e)))?;
        let threshold = rate_threshold(distance, &config.thresholds);
        let rate = fetched.rate_bytes_per_s;
        Ok(Outcome::new(
            rate_status(rate, distance, &config.thresholds),
            format!("{:.1} MB/s at {distance:.0} km", rate / 1e6),
        )
        .metric("rate_bytes_per_s", rate.round())
        .metric("distance_km", (distance * 10.0).round() / 10.0)
        .metric("threshold_bytes_per_s", threshold))
    };
    attempt().unwrap_or_else(|o| o)
}

fn service_endpoint<'a>(target: &str, topology: &'a FederationTopology) -> Option<&'a str> {
    if let Some(c) = topology.cache(target) {
        return Some(&c.endpoint);
    }
    if let Some(o) = topology.origin(target) {
        return Some(&o.endpoint);
    }
    match target {
        "redirector" => Some(&topology.redirector_endpoint),
        "shoveler" => topology.monitoring.as_ref().map(|m| m.shoveler_admin.as_str()),
        _ => None,
    }
}

fn service_load(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let Some(endpoint) = service_endpoint(&spec.target, topology) else {
        return Outcome::crit(format!("unknown service {:?}", spec.target));
    };
    let stats = match shoveler_stats(endpoint, config.timeout()) {
        Ok(s) => s,
        Err(e) => return Outcome::crit(e),
    };
    let ceiling = config.thresholds.max_active_connections;
    match field(&stats, "active_connections") {
        Some(active) if active >= ceiling => {
            Outcome::new(Status::Warn, format!("{active} connections, ceiling {ceiling}"))
                .metric("active_connections", active as f64)
        }
        Some(active) => Outcome::new(Status::Ok, "reachable").metric("active_connections", active as f64),
        None => Outcome::new(Status::Ok, "reachable"),
    }
}

fn redirector_alive(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> Outcome {
    let path = match spec.params.path.clone().or_else(|| topology.namespaces.first().map(|n| n.prefix.clone())) {
        Some(p) => p,
        None => return Outcome::crit("no namespace to locate"),
    };
    let started = Instant::now();
    match net::exchange(&topology.redirector_endpoint, &Request::locate(path.clone()), config.timeout()) {
        Ok(r) if r.code == StatusCode::Found => Outcome::new(
            Status::Ok,
            format!("{path} -> {}", r.location().unwrap_or("?")),
        )
        .metric("latency_ms", started.elapsed().as_millis() as f64),
        Ok(r) => Outcome::crit(format!("LOCATE {path} answered {}", r.code)),
        Err(e) => Outcome::crit(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_buckets() {
        let t = Thresholds::default();
        // 10 MB in 1 s at 100 km
        assert_eq!(rate_status(10e6, 100.0, &t), Status::Ok);
        assert_eq!(rate_status(4e6, 100.0, &t), Status::Warn);
        assert_eq!(rate_status(2.4e6, 100.0, &t), Status::Crit);
        assert_eq!(rate_threshold(499.9, &t), 5e6);
        assert_eq!(rate_threshold(500.0, &t), 2e6);
        assert_eq!(rate_threshold(3000.0, &t), 2e6);
        assert_eq!(rate_threshold(3000.1, &t), 1e6);
        assert_eq!(rate_status(1e6, 2022.0, &t), Status::Warn);
        assert_eq!(rate_status(0.6e6, 9000.0, &t), Status::Warn);
        assert_eq!(rate_status(0.4e6, 9000.0, &t), Status::Crit);
    }

    #[test]
    fn queue_thresholds() {
        let t = Thresholds::default();
        assert_eq!(queue_status(0, 100, &t), Status::Ok);
        assert_eq!(queue_status(49, 100, &t), Status::Ok);
        assert_eq!(queue_status(50, 100, &t), Status::Warn);
        assert_eq!(queue_status(89, 100, &t), Status::Warn);
        assert_eq!(queue_status(90, 100, &t), Status::Crit);
        assert_eq!(queue_status(0, 0, &t), Status::Crit);
    }

    fn dead_topology() -> FederationTopology {
        FederationTopology {
            origins: vec![],
            caches: vec![CacheSpec {
                id: "cache-1".into(),
                endpoint: "127.0.0.1:9".into(),
                latitude: 0.0,
                longitude: 0.0,
                capacity_bytes: 1,
                disk_dir: Default::default(),
            }],
            redirector_endpoint: "127.0.0.1:9".into(),
            namespaces: vec![NamespaceSpec::protected(ObjectPath::parse("/p").unwrap(), b"k".to_vec())],
            monitoring: None,
        }
    }

    #[test]
    fn unreachable_targets_are_critical() {
        let topology = dead_topology();
        let config = SuiteConfig {
            timeout_ms: 300,
            ..SuiteConfig::default()
        };
        let path = ObjectPath::parse("/p/x").unwrap();
        for spec in [
            CheckSpec::new(CheckId::RedirectorAlive, "redirector"),
            CheckSpec::new(CheckId::AuthAccess, "cache-1").with_path(path.clone()),
            CheckSpec::new(CheckId::UnauthDenied, "cache-1").with_path(path.clone()),
            CheckSpec::new(CheckId::ServiceLoad, "cache-1"),
            CheckSpec::new(CheckId::ShovelerQueue, "shoveler"),
            CheckSpec::new(CheckId::ServiceLoad, "nope"),
        ] {
            let r = run(&spec, &config, &topology);
            assert_eq!(r.status, Status::Crit, "{spec:?}: {}", r.detail);
        }
    }
}
