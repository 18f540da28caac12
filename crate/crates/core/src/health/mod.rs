//! End-to-end probe suite run against a live federation.

mod checks;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::GeoPoint;
use crate::model::{FederationTopology, ObjectPath};

pub use checks::{queue_status, rate_status, rate_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    AuthAccess,
    UnauthDenied,
    ShovelerThroughput,
    ShovelerQueue,
    CopyPublic,
    CopyPrivate,
    TransferRate,
    ServiceLoad,
    RedirectorAlive,
}

impl CheckId {
    pub const ALL: [CheckId; 9] = [
        CheckId::AuthAccess,
        CheckId::UnauthDenied,
        CheckId::ShovelerThroughput,
        CheckId::ShovelerQueue,
        CheckId::CopyPublic,
        CheckId::CopyPrivate,
        CheckId::TransferRate,
        CheckId::ServiceLoad,
        CheckId::RedirectorAlive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckId::AuthAccess => "auth_access",
            CheckId::UnauthDenied => "unauth_denied",
            CheckId::ShovelerThroughput => "shoveler_throughput",
            CheckId::ShovelerQueue => "shoveler_queue",
            CheckId::CopyPublic => "copy_public",
            CheckId::CopyPrivate => "copy_private",
            CheckId::TransferRate => "transfer_rate",
            CheckId::ServiceLoad => "service_load",
            CheckId::RedirectorAlive => "redirector_alive",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown check {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Ok,
    Warn,
    Crit,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "OK",
            Status::Warn => "WARN",
            Status::Crit => "CRIT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: CheckId,
    pub target: String,
    pub status: Status,
    pub metrics: BTreeMap<String, f64>,
    pub detail: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub ok: usize,
    pub warn: usize,
    pub crit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub started_at: String,
    pub results: Vec<CheckResult>,
    pub summary: Summary,
}

impl HealthReport {
    pub fn new(started_at: String, results: Vec<CheckResult>) -> Self {
        let mut summary = Summary::default();
        for r in &results {
            match r.status {
                Status::Ok => summary.ok += 1,
                Status::Warn => summary.warn += 1,
                Status::Crit => summary.crit += 1,
            }
        }
        Self {
            started_at,
            results,
            summary,
        }
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.summary.crit > 0)
    }

    /// (check, target) pairs whose status is not OK.
    pub fn failing(&self) -> Vec<(CheckId, String)> {
        self.results
            .iter()
            .filter(|r| r.status != Status::Ok)
            .map(|r| (r.check_id, r.target.clone()))
            .collect()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let metrics = r
                .metrics
                .iter()
                .map(|(k, v)| format!("{k}={}", format_number(*v)))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                out,
                "{:<4} {:<19} {:<16} {:>6}ms  {}{}{}",
                r.status.to_string(),
                r.check_id.as_str(),
                r.target,
                r.duration_ms,
                metrics,
                if metrics.is_empty() { "" } else { "  " },
                r.detail
            );
        }
        let _ = writeln!(
            out,
            "summary: {} OK, {} WARN, {} CRIT",
            self.summary.ok, self.summary.warn, self.summary.crit
        );
        out
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Distance-bucketed minimum transfer rates in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub near_km: f64,
    pub far_km: f64,
    pub near_rate: f64,
    pub mid_rate: f64,
    pub far_rate: f64,
    /// Queue depth as a fraction of its bound.
    pub queue_warn: f64,
    pub queue_crit: f64,
    pub max_active_connections: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            near_km: 500.0,
            far_km: 3000.0,
            near_rate: 5e6,
            mid_rate: 2e6,
            far_rate: 1e6,
            queue_warn: 0.5,
            queue_crit: 0.9,
            max_active_connections: 64,
        }
    }
}

/// Per-check parameters. Which fields matter depends on the check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckParams {
    /// Probe object.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<ObjectPath>,
    /// Expected SHA-256 of the probe object, hex.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Cache to fetch through; defaults to the one nearest the client.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub check: CheckId,
    pub target: String,
    #[serde(default)]
    pub params: CheckParams,
}

impl CheckSpec {
    pub fn new(check: CheckId, target: impl Into<String>) -> Self {
        Self {
            check,
            target: target.into(),
            params: CheckParams::default(),
        }
    }

    pub fn with_path(mut self, path: ObjectPath) -> Self {
        self.params.path = Some(path);
        self
    }

    pub fn with_sha256(mut self, digest: impl Into<String>) -> Self {
        self.params.sha256 = Some(digest.into());
        self
    }

    pub fn via(mut self, cache: impl Into<String>) -> Self {
        self.params.via = Some(cache.into());
        self
    }
}

fn default_client() -> String {
    "0,0".into()
}

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Where the prober stands, "lat,lon".
    #[serde(default = "default_client")]
    pub client_location: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            client_location: default_client(),
            timeout_ms: default_timeout_ms(),
            thresholds: Thresholds::default(),
            checks: Vec::new(),
        }
    }
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let config: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        config.client()?;
        Ok(config)
    }

    pub fn client(&self) -> Result<GeoPoint, String> {
        self.client_location.parse().map_err(|e| format!("client_location: {e}"))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Runs one check. Failures of the target are reported as results, never
/// as errors.
pub fn run_check(spec: &CheckSpec, config: &SuiteConfig, topology: &FederationTopology) -> CheckResult {
    checks::run(spec, config, topology)
}

/// Runs every configured check concurrently; results keep config order.
pub fn run_suite(config: &SuiteConfig, topology: &FederationTopology) -> HealthReport {
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let results = thread::scope(|scope| {
        let handles: Vec<_> = config
            .checks
            .iter()
            .map(|spec| scope.spawn(move || run_check(spec, config, topology)))
            .collect();
        handles
            .into_iter()
            .zip(&config.checks)
            .map(|(h, spec)| {
                h.join().unwrap_or_else(|_| CheckResult {
                    check_id: spec.check,
                    target: spec.target.clone(),
                    status: Status::Crit,
                    metrics: BTreeMap::new(),
                    detail: "check panicked".into(),
                    duration_ms: 0,
                })
            })
            .collect()
    });
    HealthReport::new(started_at, results)
}
