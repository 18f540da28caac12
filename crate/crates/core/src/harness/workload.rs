use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::Federation;
use crate::client::{self, CacheStatus, FetchOptions, GeoPoint};
use crate::model::{mint_token, resolve_namespace, FederationTopology, ObjectPath};
use crate::monitoring::accounting::Usage;

/// One scripted fetch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStep {
    pub at_ms: u64,
    pub client_loc: GeoPoint,
    pub path: ObjectPath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at_ms: u64,
    pub path: ObjectPath,
    /// Response status; absent when no cache answered.
    pub status: Option<u16>,
    pub x_cache: Option<CacheStatus>,
    pub bytes: u64,
    pub served_by: Option<String>,
    pub rate_bytes_per_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trace without measured rates, one JSON object per line. Equal seeds
    /// give byte-identical canonical traces.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let v = serde_json::json!({
                "at_ms": e.at_ms,
                "path": e.path,
                "status": e.status,
                "x_cache": e.x_cache,
                "bytes": e.bytes,
                "served_by": e.served_by,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    /// Delivered transfers and bytes.
    pub fn totals(&self) -> Usage {
        let mut u = Usage::default();
        for e in self.entries.iter().filter(|e| e.status == Some(200)) {
            u.transfers += 1;
            u.bytes += e.bytes;
        }
        u
    }
}

/// `n` requests over `objects`, popularity Zipf-distributed (exponent
/// 1.1) over a seeded ranking. Protected objects carry a valid token.
pub fn zipf_script(
    seed: u64,
    n: usize,
    objects: &[ObjectPath],
    topology: &FederationTopology,
    clients: &[GeoPoint],
) -> Vec<WorkloadStep> {
    if objects.is_empty() || clients.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranked = objects.to_vec();
    ranked.sort();
    ranked.shuffle(&mut rng);
    let zipf = Zipf::new(ranked.len() as u64, 1.1).expect("valid zipf parameters");
    let mut at_ms = 0;
    (0..n)
        .map(|_| {
            let rank = (zipf.sample(&mut rng) as usize).clamp(1, ranked.len());
            let path = ranked[rank - 1].clone();
            at_ms += rng.gen_range(1..20);
            let token = resolve_namespace(path.as_str(), &topology.namespaces)
                .ok()
                .flatten()
                .and_then(|ns| ns.secret.as_ref().map(|s| (ns.prefix.clone(), s.clone())))
                .map(|(prefix, secret)| {
                    mint_token("workload", &[format!("read:{prefix}")], 4_102_444_800, secret.as_bytes())
                        .expect("non-empty secret")
                });
            WorkloadStep {
                at_ms,
                client_loc: clients[rng.gen_range(0..clients.len())],
                path,
                token,
            }
        })
        .collect()
}

impl Federation {
    fn throttle(&self) {
        let deadline = Instant::now() + Duration::from_secs(5);
        let c = self.shoveler().counters();
        if c.queue_depth * 2 <= c.capacity {
            return;
        }
        while self.shoveler().counters().queue_depth * 4 > c.capacity && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(1));
        }
    }

    /// Runs the script sequentially in `at_ms` order. Failures are recorded
    /// in the trace. Requests pause while the shoveler queue is more than
    /// half full so monitoring keeps up.
    pub fn run_workload(&self, script: &[WorkloadStep]) -> Trace {
        let mut steps: Vec<&WorkloadStep> = script.iter().collect();
        steps.sort_by_key(|s| s.at_ms);
        let entries = steps
            .into_iter()
            .map(|step| {
                self.throttle();
                match client::fetch(
                    &step.path,
                    step.token.as_deref(),
                    step.client_loc,
                    &self.topology,
                    FetchOptions::default(),
                ) {
                    Ok(f) => TraceEntry {
                        at_ms: step.at_ms,
                        path: step.path.clone(),
                        status: Some(200),
                        x_cache: Some(f.cache_status),
                        bytes: f.bytes.len() as u64,
                        served_by: Some(f.served_by),
                        rate_bytes_per_s: f.rate_bytes_per_s,
                        error: None,
                    },
                    Err(e) => TraceEntry {
                        at_ms: step.at_ms,
                        path: step.path.clone(),
                        status: e.status().map(|c| c.code()),
                        x_cache: None,
                        bytes: 0,
                        served_by: None,
                        rate_bytes_per_s: 0.0,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        Trace { entries }
    }
}
