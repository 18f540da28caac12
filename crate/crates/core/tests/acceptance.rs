//! Acceptance criteria, one line of output per criterion.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::net::{TcpListener, UdpSocket};
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minifed::cache::LruIndex;
use minifed::client::{self, great_circle_km, nearest_caches, CacheStatus, FetchOptions, GeoPoint};
use minifed::harness::{demo_secret, zipf_script, Fault, Federation};
use minifed::health::{run_suite, CheckId, HealthReport, Status};
use minifed::model::{mint_token, CacheSpec, Component, Event, MonitorRecord, ObjectPath, Stream};
use minifed::monitoring::accounting::{aggregate, AggregateFilter};
use minifed::monitoring::{Backoff, Collector, CollectorServer, Shoveler, ShovelerConfig};
use minifed::net;
use minifed::wire::{
    decode_frame, decode_monitor_record, encode_frame, encode_monitor_record, frame_read, FrameError, Method,
    ProtocolErrorKind, Request, Response, StatusCode,
};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn op(s: &str) -> ObjectPath {
    ObjectPath::parse(s).unwrap()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs()
}

fn spawn(seed: u64) -> Result<Federation, String> {
    Federation::spawn_minimal(seed).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn end_to_end() -> Verdict {
    let fed = spawn(11)?;
    let (path, _) = fed
        .catalog()
        .iter()
        .find(|(p, _)| p.is_under(&op("/nova")))
        .cloned()
        .ok_or("no public object")?;
    let on_disk = fs::read(fed.origin_file(&path).unwrap()).map_err(|e| e.to_string())?;
    let at = GeoPoint::new(40.0, -96.0).unwrap();
    let get = || client::fetch(&path, None, at, fed.topology(), FetchOptions::default()).map_err(|e| e.to_string());
    let first = get()?;
    let second = get()?;
    ensure!(first.cache_status == CacheStatus::Miss, "first fetch was {:?}", first.cache_status);
    ensure!(second.cache_status == CacheStatus::Hit, "second fetch was {:?}", second.cache_status);
    ensure!(first.bytes == on_disk && second.bytes == on_disk, "bodies differ from the origin file");
    ensure!(fed.settle(Duration::from_secs(4)), "monitoring did not settle");
    let log = fs::read_to_string(fed.collector_log()).map_err(|e| e.to_string())?;
    let events: Vec<Event> = log
        .lines()
        .filter_map(|l| decode_monitor_record(l.as_bytes()).ok())
        .filter(|r| r.stream == Stream::Cache && r.path == path)
        .map(|r| r.event)
        .collect();
    ensure!(events == [Event::Miss, Event::Hit], "g-stream events {events:?}");
    Ok(format!("MISS then HIT, {} bytes identical, g-stream [miss, hit]", on_disk.len()))
}

// ---------------------------------------------------------------- 2

/// Days since 1970-01-01 to (year, month), after H. Hinnant.
fn civil(days: i64) -> (i64, i64) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (yoe + era * 400 + i64::from(m <= 2), m)
}

/// Recount straight from the raw log lines.
fn recount(log: &str, prefixes: &[String]) -> BTreeMap<(String, String), (u64, u64)> {
    let mut out = BTreeMap::new();
    for line in log.lines() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else { continue };
        if v["stream"] != "f" || v["event"] != "close" || v["component"] != "cache" {
            continue;
        }
        let path = v["path"].as_str().unwrap();
        let ns = prefixes
            .iter()
            .filter(|p| path == p.as_str() || path.starts_with(&format!("{p}/")))
            .max_by_key(|p| p.len())
            .cloned()
            .unwrap_or_else(|| "/_unknown".into());
        let (y, m) = civil((v["ts_ms"].as_u64().unwrap() / 86_400_000) as i64);
        let e = out.entry((ns, format!("{y:04}-{m:02}"))).or_insert((0, 0));
        e.0 += 1;
        e.1 += v["bytes"].as_u64().unwrap();
    }
    out
}

fn accounting() -> Verdict {
    let fed = spawn(21)?;
    let objects: Vec<ObjectPath> = fed.catalog().iter().map(|(p, _)| p.clone()).collect();
    let namespaces: BTreeSet<String> = objects
        .iter()
        .map(|p| format!("/{}", p.components().next().unwrap()))
        .collect();
    ensure!(namespaces.len() >= 5, "only {} namespaces", namespaces.len());
    let clients: Vec<GeoPoint> = ["40.8,-96.7", "32.9,-117.2", "41.9,-87.6", "46.2,6.1"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let script = zipf_script(21, 10_000, &objects, fed.topology(), &clients);
    let trace = fed.run_workload(&script);
    ensure!(trace.totals().transfers == 10_000, "{} of 10000 delivered", trace.totals().transfers);
    ensure!(fed.settle(Duration::from_secs(20)), "monitoring did not settle");

    let log_path = fed.collector_log();
    let log = fs::read_to_string(&log_path).map_err(|e| e.to_string())?;
    let prefix_strings: Vec<String> = fed.topology().namespaces.iter().map(|n| n.prefix.to_string()).collect();
    let prefixes: Vec<ObjectPath> = fed.topology().namespaces.iter().map(|n| n.prefix.clone()).collect();
    let table = aggregate(&log, &prefixes, &AggregateFilter::default());
    let oracle = recount(&log, &prefix_strings);
    let got: BTreeMap<_, _> = table.rows.iter().map(|(k, u)| (k.clone(), (u.transfers, u.bytes))).collect();
    ensure!(got == oracle, "table differs from recount:\n{got:?}\n{oracle:?}");
    ensure!(
        table.totals() == trace.totals(),
        "table totals {:?} vs trace {:?}, shoveler {:?}",
        table.totals(),
        trace.totals(),
        fed.shoveler().counters()
    );

    // Ranked report through the command line.
    let topo_file = fed.root().join("topology.json");
    fs::write(&topo_file, fed.topology().to_json()).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_minifed"))
        .args(["report", "--top", "3", "--metric", "transfers", "--log"])
        .arg(&log_path)
        .arg("--topology")
        .arg(&topo_file)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "report failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(String, u64, u64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_owned(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let mut per_ns: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for ((ns, _), (t, b)) in &oracle {
        let e = per_ns.entry(ns.clone()).or_default();
        e.0 += t;
        e.1 += b;
    }
    let mut ranked: Vec<(String, u64, u64)> = per_ns.into_iter().map(|(k, (t, b))| (k, t, b)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut expected: Vec<(String, u64, u64)> = ranked.iter().take(3).cloned().collect();
    let rest = ranked[3..].iter().fold((0, 0), |acc, r| (acc.0 + r.1, acc.1 + r.2));
    expected.push(("Other".into(), rest.0, rest.1));
    ensure!(rows == expected, "report rows {rows:?}, expected {expected:?}");
    Ok(format!(
        "{} rows equal recount exactly, {} transfers; top 3 + Other = {:?}",
        table.rows.len(),
        table.totals().transfers,
        rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- 3

fn lru() -> Verdict {
    const CAPACITY: u64 = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut index = LruIndex::new(CAPACITY);
    // Reference: least recent first.
    let mut reference: Vec<(String, u64)> = Vec::new();
    let mut now = 0u64;
    let mut evictions = 0usize;
    for step in 0..1000 {
        for _ in 0..rng.gen_range(0..3) {
            if reference.is_empty() {
                break;
            }
            now += rng.gen_range(0..2);
            let i = rng.gen_range(0..reference.len());
            let hit = reference.remove(i);
            index.touch(&op(&hit.0), now);
            reference.push(hit);
        }
        now += rng.gen_range(0..2);
        let name = format!("/o/{}", rng.gen_range(0..60));
        let size = rng.gen_range(1..=CAPACITY / 3);
        let got: Vec<String> = index
            .admit(op(&name), size, now, Default::default())
            .map_err(|e| format!("step {step}: {e:?}"))?
            .into_iter()
            .map(|e| e.path.to_string())
            .collect();
        reference.retain(|(p, _)| p != &name);
        let mut want = Vec::new();
        while reference.iter().map(|r| r.1).sum::<u64>() + size > CAPACITY {
            want.push(reference.remove(0).0);
        }
        reference.push((name, size));
        ensure!(got == want, "step {step}: evicted {got:?}, reference {want:?}");
        ensure!(index.used() <= CAPACITY, "step {step}: {} bytes over capacity", index.used());
        let sum: u64 = index.entries_by_recency().iter().map(|e| e.size_bytes).sum();
        ensure!(sum == index.used() && sum <= CAPACITY, "step {step}: entry sizes sum to {sum}");
        evictions += got.len();
    }
    let order: Vec<String> = index.entries_by_recency().iter().map(|e| e.path.to_string()).collect();
    let reference_order: Vec<String> = reference.iter().map(|r| r.0.clone()).collect();
    ensure!(order == reference_order, "final recency order differs");
    Ok(format!("1000 admissions, {evictions} evictions identical, capacity never exceeded"))
}

// ---------------------------------------------------------------- 4

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1, la2, lo2) = (a.0.to_radians(), a.1.to_radians(), b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

fn nearest() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for set in 0..200 {
        let client = (rng.gen_range(-90.0..=90.0), rng.gen_range(-180.0..=180.0));
        let n = rng.gen_range(1..=12);
        let mut ids: Vec<String> = (0..n).map(|i| format!("cache-{i:02}")).collect();
        ids.shuffle(&mut rng);
        let mut caches: Vec<CacheSpec> = Vec::new();
        for id in ids {
            let (lat, lon) = match caches.choose(&mut rng) {
                Some(c) if rng.gen_bool(0.3) => {
                    ties += 1;
                    (c.latitude, c.longitude)
                }
                _ => (rng.gen_range(-90.0..=90.0), rng.gen_range(-180.0..=180.0)),
            };
            caches.push(CacheSpec {
                id,
                endpoint: "127.0.0.1:1".into(),
                latitude: lat,
                longitude: lon,
                capacity_bytes: 1,
                disk_dir: Default::default(),
            });
        }
        let got = nearest_caches(GeoPoint::new(client.0, client.1).unwrap(), &caches).map_err(|e| e.to_string())?;
        // Selection sort by (distance, id).
        let mut pool: Vec<(f64, String)> = caches
            .iter()
            .map(|c| (haversine(client, (c.latitude, c.longitude)), c.id.clone()))
            .collect();
        let mut want = Vec::new();
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                if pool[i].0 < pool[best].0 || (pool[i].0 == pool[best].0 && pool[i].1 < pool[best].1) {
                    best = i;
                }
            }
            want.push(pool.remove(best).1);
        }
        ensure!(got == want, "set {set}: {got:?} vs {want:?}");
    }
    for (lat, lon) in [(0.0, 0.0), (32.88, -117.23), (-89.9, 179.9)] {
        let x = GeoPoint::new(lat, lon).unwrap();
        ensure!(great_circle_km(x, x) == 0.0, "d(x,x) != 0 at {lat},{lon}");
    }
    let quarter = great_circle_km(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(90.0, 0.0).unwrap());
    ensure!((quarter - 10007.54).abs() <= 0.01, "(0,0)->(90,0) = {quarter}");
    Ok(format!("200 sets identical ({ties} forced ties), (0,0)->(90,0) = {quarter:.4} km"))
}

// ---------------------------------------------------------------- 5

fn durability() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("records.log");
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let collector_addr = listener.local_addr().unwrap();
    let mut first = CollectorServer::start(Arc::new(Collector::open(&log).unwrap()), listener).unwrap();
    first.crash_after_stored(30);

    let udp = UdpSocket::bind("127.0.0.1:0").unwrap();
    let udp_addr = udp.local_addr().unwrap();
    let shoveler = Arc::new(
        Shoveler::start(
            udp,
            TcpListener::bind("127.0.0.1:0").unwrap(),
            ShovelerConfig {
                queue_bound: 100,
                backoff: Backoff::new(Duration::from_millis(50), Duration::from_millis(400)),
                ack_timeout: Duration::from_secs(1),
                ..ShovelerConfig::new(collector_addr.to_string())
            },
        )
        .unwrap(),
    );

    let stop = Arc::new(AtomicBool::new(false));
    let samples = Arc::new(AtomicU64::new(0));
    let violations = Arc::new(AtomicU64::new(0));
    let sampler = {
        let (shoveler, stop, samples, violations) = (shoveler.clone(), stop.clone(), samples.clone(), violations.clone());
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if !shoveler.counters().conserved() {
                    violations.fetch_add(1, Ordering::SeqCst);
                }
                samples.fetch_add(1, Ordering::SeqCst);
                thread::sleep(Duration::from_micros(200));
            }
        })
    };

    let sender = UdpSocket::bind("127.0.0.1:0").unwrap();
    let path = op("/ligo/durable");
    let mut expected = BTreeSet::new();
    for i in 0..80u64 {
        let xfer = format!("durable-{i:02}");
        let r = MonitorRecord::new(Event::Close, 1_700_000_000_000 + i, "cache-1", Component::Cache, &path, i, "c", &xfer)
            .with_duration(1);
        sender.send_to(&encode_monitor_record(&r).unwrap(), udp_addr).unwrap();
        expected.insert(xfer);
    }

    let deadline = Instant::now() + Duration::from_secs(10);
    while !first.crashed() {
        ensure!(Instant::now() < deadline, "collector never reached 30 stored records");
        thread::sleep(Duration::from_millis(5));
    }
    let stored_before_crash = first.collector().counters().stored;
    first.shutdown();
    drop(first);
    thread::sleep(Duration::from_millis(200));

    let second = CollectorServer::start(
        Arc::new(Collector::open(&log).unwrap()),
        TcpListener::bind(collector_addr).map_err(|e| format!("rebind: {e}"))?,
    )
    .unwrap();
    let deadline = Instant::now() + Duration::from_secs(15);
    loop {
        let c = shoveler.counters();
        if c.forwarded == 80 && c.queue_depth == 0 {
            break;
        }
        ensure!(Instant::now() < deadline, "shoveler stuck: {c:?}");
        thread::sleep(Duration::from_millis(10));
    }
    stop.store(true, Ordering::SeqCst);
    sampler.join().unwrap();

    let text = fs::read_to_string(&log).unwrap();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines() {
        let r = decode_monitor_record(line.as_bytes()).map_err(|e| format!("bad log line: {e}"))?;
        *seen.entry(r.xfer_id).or_default() += 1;
    }
    ensure!(seen.keys().cloned().collect::<BTreeSet<_>>() == expected, "log holds {} distinct records", seen.len());
    ensure!(seen.values().all(|&n| n == 1), "some records appear more than once");
    let c = shoveler.counters();
    ensure!(c.received == 80 && c.dropped == 0 && c.conserved(), "final counters {c:?}");
    let v = violations.load(Ordering::SeqCst);
    ensure!(v == 0, "{v} conservation violations");
    let dups = second.collector().counters().duplicates;
    ensure!(dups >= 1, "the unacknowledged record was not redelivered");
    Ok(format!(
        "crash after {stored_before_crash}, 80/80 exactly once, {dups} redelivery deduplicated, {} samples conserved",
        samples.load(Ordering::SeqCst)
    ))
}

// ---------------------------------------------------------------- 6

fn authorization() -> Verdict {
    let fed = spawn(6)?;
    let secret = demo_secret("/ligo");
    let public = op("/nova/obj-00.bin");
    let protected = op("/ligo/obj-00.bin");
    let valid = mint_token("alice", &["read:/ligo"], now_secs() + 3600, &secret).unwrap();
    let wrong_scope = mint_token("alice", &["read:/nova"], now_secs() + 3600, &secret).unwrap();
    let expired = mint_token("alice", &["read:/ligo"], now_secs() - 10, &secret).unwrap();
    let endpoints = [
        ("cache", fed.topology().caches[0].endpoint.clone()),
        ("origin", fed.topology().origins[0].endpoint.clone()),
    ];
    let code = |endpoint: &str, path: &ObjectPath, token: Option<&str>| -> Result<u16, String> {
        let mut req = Request::get(path.clone());
        if let Some(t) = token {
            req = req.with_bearer(t);
        }
        net::exchange(endpoint, &req, Duration::from_secs(5))
            .map(|r| r.code.code())
            .map_err(|e| e.to_string())
    };
    for (name, endpoint) in &endpoints {
        let got = [
            code(endpoint, &public, None)?,
            code(endpoint, &protected, None)?,
            code(endpoint, &protected, Some(&wrong_scope))?,
            code(endpoint, &protected, Some(&expired))?,
            code(endpoint, &protected, Some(&valid))?,
        ];
        ensure!(got == [200, 401, 403, 403, 200], "{name}: {got:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bytes = valid.as_bytes();
    for k in 0..256 {
        let mut corrupt = bytes.to_vec();
        let pos = rng.gen_range(0..corrupt.len());
        let mut b = rng.gen_range(0x21u8..=0x7e);
        while b == corrupt[pos] {
            b = rng.gen_range(0x21u8..=0x7e);
        }
        corrupt[pos] = b;
        let token = String::from_utf8(corrupt).unwrap();
        for (name, endpoint) in &endpoints {
            let c = code(endpoint, &protected, Some(&token))?;
            ensure!(c == 401 || c == 403, "{name}: corruption {k} at byte {pos} answered {c}");
        }
    }
    Ok("200/401/403/403/200 at cache and origin; 256 corruptions denied at both".into())
}

// ---------------------------------------------------------------- 7

fn statuses(report: &HealthReport) -> BTreeMap<(CheckId, String), Status> {
    report
        .results
        .iter()
        .map(|r| ((r.check_id, r.target.clone()), r.status))
        .collect()
}

fn fault_matrix() -> Verdict {
    let mut fed = spawn(7)?;
    let suite = fed.default_suite();
    let warm = run_suite(&suite, fed.topology());
    ensure!(warm.failing().is_empty(), "unhealthy before faults:\n{}", warm.render_text());
    ensure!(fed.settle(Duration::from_secs(5)), "did not settle");

    let s = |c: CheckId, t: &str| (c, t.to_owned());
    let matrix: Vec<(Fault, BTreeMap<(CheckId, String), Status>)> = vec![
        (Fault::KillRedirector, BTreeMap::from([(s(CheckId::RedirectorAlive, "redirector"), Status::Crit)])),
        (
            Fault::KillOrigin("origin-1".into()),
            BTreeMap::from([(s(CheckId::ServiceLoad, "origin-1"), Status::Crit)]),
        ),
        (
            Fault::KillCache("cache-1".into()),
            BTreeMap::from([
                (s(CheckId::AuthAccess, "cache-1"), Status::Crit),
                (s(CheckId::UnauthDenied, "cache-1"), Status::Crit),
                (s(CheckId::TransferRate, "cache-1"), Status::Crit),
                (s(CheckId::CopyPublic, "origin-1"), Status::Crit),
                (s(CheckId::CopyPrivate, "origin-1"), Status::Crit),
                (s(CheckId::ServiceLoad, "cache-1"), Status::Crit),
            ]),
        ),
        (Fault::StallCollector, BTreeMap::from([(s(CheckId::ShovelerQueue, "shoveler"), Status::Warn)])),
        (Fault::FillShovelerQueue, BTreeMap::from([(s(CheckId::ShovelerQueue, "shoveler"), Status::Crit)])),
        (
            Fault::CorruptNamespaceSecret(None),
            BTreeMap::from([
                (s(CheckId::AuthAccess, "cache-1"), Status::Crit),
                (s(CheckId::CopyPrivate, "origin-1"), Status::Crit),
            ]),
        ),
    ];
    for (fault, expected) in &matrix {
        fed.inject_fault(fault).map_err(|e| format!("{fault}: {e}"))?;
        if *fault == Fault::KillRedirector {
            let fresh = op("/uboone/obj-07.bin");
            let r = net::exchange(&fed.topology().caches[0].endpoint, &Request::get(fresh), Duration::from_secs(5))
                .map_err(|e| e.to_string())?;
            ensure!(matches!(r.code.code(), 404 | 500), "uncached object with redirector down: {}", r.code);
        }
        let report = run_suite(&suite, fed.topology());
        let got: BTreeMap<_, _> = statuses(&report).into_iter().filter(|(_, st)| *st != Status::Ok).collect();
        ensure!(&got == expected, "{fault}: non-OK {got:?}, expected {expected:?}\n{}", report.render_text());
        fed.clear_fault(fault).map_err(|e| format!("clear {fault}: {e}"))?;
        ensure!(fed.settle(Duration::from_secs(10)), "{fault}: did not settle after clearing");
        let after = run_suite(&suite, fed.topology());
        ensure!(after.failing().is_empty(), "{fault}: still unhealthy after clearing\n{}", after.render_text());
    }
    Ok(format!("6 faults, each flipped exactly its mapped checks, {} checks per run", suite.checks.len()))
}

// ---------------------------------------------------------------- 8

const NAME_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.~";

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[u8], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

fn random_path(rng: &mut ChaCha8Rng) -> ObjectPath {
    let depth = rng.gen_range(1..=4);
    let mut s = String::new();
    for _ in 0..depth {
        let mut c = random_string(rng, NAME_CHARS, 1, 12);
        if c == "." || c == ".." {
            c.push('x');
        }
        s.push('/');
        s.push_str(&c);
    }
    op(&s)
}

fn random_value(rng: &mut ChaCha8Rng) -> String {
    let printable: Vec<u8> = (0x21u8..=0x7e).collect();
    let mut v = random_string(rng, &printable, 1, 20);
    if rng.gen_bool(0.3) {
        v.push(' ');
        v.push_str(&random_string(rng, &printable, 1, 8));
    }
    v
}

fn random_headers(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    let names = ["X-Trace", "Accept", "User-Agent", "X-Client-Site", "Via"];
    (0..rng.gen_range(0..4))
        .map(|_| (names[rng.gen_range(0..names.len())].to_owned(), random_value(rng)))
        .collect()
}

fn random_unicode(rng: &mut ChaCha8Rng) -> String {
    let pool = ['a', 'Z', '0', '"', '\\', '/', ' ', 'é', 'λ', '漢', '\u{1F600}', '\t', '\n', '\u{7f}'];
    (0..rng.gen_range(1..=16)).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

fn codec_round_trips() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10_000 {
        let mut req = match rng.gen_range(0..3) {
            0 => Request::get(random_path(&mut rng)),
            1 => Request::locate(random_path(&mut rng)),
            _ => Request::stats(),
        };
        for (k, v) in random_headers(&mut rng) {
            req = req.with_header(&k, v);
        }
        if rng.gen_bool(0.3) {
            req = req.with_bearer(&random_string(&mut rng, NAME_CHARS, 1, 40));
        }
        let bytes = req.encode().map_err(|e| format!("request {i}: {e}"))?;
        let back = Request::decode(&bytes).map_err(|e| format!("request {i}: {e}"))?;
        ensure!(back == req, "request {i} changed: {req:?} -> {back:?}");
    }
    for i in 0..10_000 {
        let mut resp = match rng.gen_range(0..6) {
            0 | 1 => {
                let body: Vec<u8> = (0..rng.gen_range(0..300)).map(|_| rng.gen()).collect();
                let r = Response::ok(body);
                match rng.gen_range(0..3) {
                    0 => r.with_header("X-Cache", "HIT"),
                    1 => r.with_header("X-Cache", "MISS"),
                    _ => r,
                }
            }
            2 => Response::redirect(&format!("127.0.0.1:{}", rng.gen_range(1..65535u32))),
            3 => Response::empty(StatusCode::Unauthorized),
            4 => Response::empty(StatusCode::Forbidden),
            _ => Response::empty(if rng.gen() { StatusCode::NotFound } else { StatusCode::InternalError }),
        };
        for (k, v) in random_headers(&mut rng) {
            resp = resp.with_header(&k, v);
        }
        let bytes = resp.encode().map_err(|e| format!("response {i}: {e}"))?;
        let back = Response::decode(&bytes).map_err(|e| format!("response {i}: {e}"))?;
        ensure!(back == resp, "response {i} changed");
    }
    let events = [Event::Open, Event::Close, Event::Hit, Event::Miss, Event::Evict];
    for i in 0..10_000 {
        let event = events[rng.gen_range(0..events.len())];
        let component = if rng.gen() { Component::Cache } else { Component::Origin };
        let mut r = MonitorRecord::new(
            event,
            rng.gen(),
            &random_unicode(&mut rng),
            component,
            &random_path(&mut rng),
            rng.gen(),
            &random_unicode(&mut rng),
            &random_unicode(&mut rng),
        );
        if event == Event::Close {
            r = r.with_duration(rng.gen());
        }
        let bytes = encode_monitor_record(&r).map_err(|e| format!("record {i}: {e}"))?;
        let back = decode_monitor_record(&bytes).map_err(|e| format!("record {i}: {e}"))?;
        ensure!(back == r, "record {i} changed");
        ensure!(encode_monitor_record(&back).unwrap() == bytes, "record {i} not canonical");
    }
    for i in 0..10_000 {
        let len = if rng.gen_bool(0.01) { rng.gen_range(0..200_000) } else { rng.gen_range(0..512) };
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let framed = encode_frame(&payload).map_err(|e| format!("frame {i}: {e}"))?;
        let (back, used) = decode_frame(&framed).map_err(|e| e.to_string())?.ok_or("incomplete")?;
        ensure!(back == payload && used == framed.len(), "frame {i} changed");
        let read = frame_read(&mut Cursor::new(&framed)).map_err(|e| e.to_string())?;
        ensure!(read.as_deref() == Some(&payload[..]), "frame {i} read back differently");
    }
    Ok(())
}

fn request_kind(bytes: &[u8]) -> String {
    match Request::decode(bytes) {
        Ok(_) => "accepted".into(),
        Err(e) => format!("{:?}", e.kind),
    }
}

fn response_kind(bytes: &[u8]) -> String {
    match Response::decode(bytes) {
        Ok(_) => "accepted".into(),
        Err(e) => format!("{:?}", e.kind),
    }
}

fn record_class(bytes: &[u8]) -> String {
    match decode_monitor_record(bytes) {
        Ok(_) => "accepted".into(),
        Err(e) => e.class().into(),
    }
}

fn frame_class(bytes: &[u8]) -> String {
    match frame_read(&mut Cursor::new(bytes)) {
        Ok(_) => "accepted".into(),
        Err(FrameError::TooLarge(_)) => "too-large".into(),
        Err(FrameError::ShortRead) => "short-read".into(),
        Err(FrameError::Io(e)) => format!("io {e}"),
    }
}

fn mutate_record(f: impl FnOnce(&mut serde_json::Map<String, serde_json::Value>)) -> Vec<u8> {
    let r = MonitorRecord::new(Event::Close, 5, "h", Component::Cache, &op("/a/b"), 7, "c", "x").with_duration(2);
    let mut v: serde_json::Value = serde_json::from_slice(&encode_monitor_record(&r).unwrap()).unwrap();
    f(v.as_object_mut().unwrap());
    serde_json::to_vec(&v).unwrap()
}

fn malformed_corpus() -> Result<usize, String> {
    use serde_json::json;
    let auth_twice = b"GET /a OSDF-MINI/1\r\nAuthorization: Bearer x\r\nAuthorization: Bearer y\r\n\r\n";
    let requests: Vec<(&[u8], String)> = vec![
        (b"FETCH /a OSDF-MINI/1\r\n\r\n", format!("{:?}", ProtocolErrorKind::UnknownMethod)),
        (b"GET /a HTTP/1.1\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadVersion)),
        (b"GET a/b OSDF-MINI/1\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadPath)),
        (b"GET /a/../b OSDF-MINI/1\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadPath)),
        (auth_twice, format!("{:?}", ProtocolErrorKind::DuplicateAuthorization)),
        (b"GET /a OSDF-MINI/1\r\nNoColon\r\n\r\n", format!("{:?}", ProtocolErrorKind::MalformedHeader)),
        (b"GET /a OSDF-MINI/1\r\n", format!("{:?}", ProtocolErrorKind::Incomplete)),
        (b"GET /a\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadStartLine)),
        (b"GET /\xff OSDF-MINI/1\r\n\r\n", format!("{:?}", ProtocolErrorKind::NotUtf8)),
    ];
    let responses: Vec<(&[u8], String)> = vec![
        (b"OSDF-MINI/1 200 OK\r\n\r\n", format!("{:?}", ProtocolErrorKind::MissingHeader("Content-Length"))),
        (b"OSDF-MINI/1 302 Found\r\n\r\n", format!("{:?}", ProtocolErrorKind::MissingHeader("Location"))),
        (b"OSDF-MINI/1 299 Odd\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadStatus)),
        (b"OSDF-MINI/1 200 OK\r\nContent-Length: 5\r\n\r\nabc", format!("{:?}", ProtocolErrorKind::LengthMismatch)),
        (b"OSDF-MINI/1 404 Not Found\r\n\r\nxyz", format!("{:?}", ProtocolErrorKind::UnexpectedBody)),
        (b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n", format!("{:?}", ProtocolErrorKind::BadVersion)),
    ];
    let oversize = vec![b' '; 9000];
    let records: Vec<(Vec<u8>, &str)> = vec![
        (oversize, "oversize"),
        (b"{not json".to_vec(), "invalid-json"),
        (b"[1,2,3]".to_vec(), "invalid-json"),
        (mutate_record(|m| drop(m.remove("host"))), "missing-field"),
        (mutate_record(|m| drop(m.insert("color".into(), json!("red")))), "unknown-field"),
        (mutate_record(|m| drop(m.insert("bytes".into(), json!("7")))), "wrong-type"),
        (mutate_record(|m| drop(m.insert("stream".into(), json!("x")))), "unknown-stream"),
        (mutate_record(|m| drop(m.insert("event".into(), json!("teleport")))), "unknown-value"),
        (mutate_record(|m| drop(m.insert("component".into(), json!("router")))), "unknown-value"),
        (mutate_record(|m| drop(m.insert("event".into(), json!("hit")))), "stream-event-mismatch"),
        (mutate_record(|m| drop(m.remove("duration_ms"))), "stream-event-mismatch"),
        (mutate_record(|m| drop(m.insert("path".into(), json!("relative/p")))), "bad-path"),
    ];
    let frames: Vec<(Vec<u8>, &str)> = vec![
        (vec![0x01, 0x00, 0x00, 0x00], "too-large"),
        (vec![0x00, 0x00, 0x00, 0x08, b'a', b'b'], "short-read"),
        (vec![0x00, 0x00], "short-read"),
    ];
    let mut n = 0;
    for (bytes, want) in &requests {
        let got = request_kind(bytes);
        ensure!(&got == want, "request {:?}: {got}, expected {want}", String::from_utf8_lossy(bytes));
        n += 1;
    }
    for (bytes, want) in &responses {
        let got = response_kind(bytes);
        ensure!(&got == want, "response {:?}: {got}, expected {want}", String::from_utf8_lossy(bytes));
        n += 1;
    }
    for (bytes, want) in &records {
        let got = record_class(bytes);
        ensure!(got == *want, "record {:?}: {got}, expected {want}", String::from_utf8_lossy(&bytes[..bytes.len().min(80)]));
        n += 1;
    }
    for (bytes, want) in &frames {
        let got = frame_class(bytes);
        ensure!(got == *want, "frame {bytes:?}: {got}, expected {want}");
        n += 1;
    }
    // Methods are case-sensitive.
    ensure!(Method::Get.as_str() == "GET", "method spelling");
    Ok(n)
}

fn codecs() -> Verdict {
    codec_round_trips()?;
    let n = malformed_corpus()?;
    Ok(format!("4 x 10000 round trips identical, {n} malformed inputs rejected with their classes"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(u32, &str, u64, fn() -> Verdict); 8] = [
        (1, "end-to-end flow", 5, end_to_end),
        (2, "accounting oracle equivalence", 60, accounting),
        (3, "LRU/capacity", 10, lru),
        (4, "nearest-cache selection", 5, nearest),
        (5, "shoveler durability", 30, durability),
        (6, "authorization matrix", 10, authorization),
        (7, "fault matrix", 60, fault_matrix),
        (8, "codec conformance", 10, codecs),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, bound, run) in criteria {
        if filter.is_some_and(|f| f != n) {
            continue;
        }
        let started = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed().as_secs_f64();
        let verdict = match verdict {
            Ok(detail) if elapsed >= bound as f64 => Err(format!("{detail}; exceeded the {bound} s bound")),
            v => v,
        };
        match verdict {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}; {elapsed:.2} s < {bound} s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why}; {elapsed:.2} s, bound {bound} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
