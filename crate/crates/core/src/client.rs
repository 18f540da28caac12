//! Client library: cache ordering by great-circle distance and fetch with
//! failover.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CacheSpec, FederationTopology, ObjectPath};
use crate::net::{self, NetError};
use crate::wire::{Request, StatusCode};

/// Mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("expected \"lat,lon\", got {0:?}")]
    Syntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn of_cache(cache: &CacheSpec) -> Result<Self, GeoError> {
        Self::new(cache.latitude, cache.longitude)
    }
}

impl FromStr for GeoPoint {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || GeoError::Syntax(s.to_owned());
        let (lat, lon) = s.split_once(',').ok_or_else(syntax)?;
        let lat = lat.trim().parse().map_err(|_| syntax())?;
        let lon = lon.trim().parse().map_err(|_| syntax())?;
        Self::new(lat, lon)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lat, self.lon)
    }
}

/// Haversine distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let d_phi = phi2 - phi1;
    let d_lambda = (b.lon - a.lon).to_radians();
    let h = (d_phi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("no caches configured")]
    NoCaches,
    #[error("cache {id}: {source}")]
    BadCache { id: String, source: GeoError },
}

/// Cache ids by ascending distance from `client`, ties broken by id.
pub fn nearest_caches(client: GeoPoint, caches: &[CacheSpec]) -> Result<Vec<String>, SelectError> {
    if caches.is_empty() {
        return Err(SelectError::NoCaches);
    }
    let mut ranked = caches
        .iter()
        .map(|c| {
            GeoPoint::of_cache(c)
                .map(|at| (great_circle_km(client, at), c.id.as_str()))
                .map_err(|source| SelectError::BadCache {
                    id: c.id.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().map(|(_, id)| id.to_owned()).collect())
}

/// [`nearest_caches`] for many clients; data-parallel with the `parallel`
/// feature.
pub fn nearest_caches_batch(
    clients: &[GeoPoint],
    caches: &[CacheSpec],
) -> Vec<Result<Vec<String>, SelectError>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        clients.par_iter().map(|c| nearest_caches(*c, caches)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        clients.iter().map(|c| nearest_caches(*c, caches)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CacheStatus {
    Hit,
    Miss,
}

#[derive(Debug, Clone)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    pub served_by: String,
    pub rate_bytes_per_s: f64,
    pub cache_status: CacheStatus,
}

#[derive(Debug, Error)]
pub enum DeliveryError {
    #[error("cache {cache} refused access ({code})")]
    Denied { cache: String, code: StatusCode },
    #[error("cache {cache} reports the object does not exist")]
    NotFound { cache: String },
    #[error("all caches failed: {}", format_failures(.0))]
    Exhausted(Vec<(String, String)>),
    #[error(transparent)]
    Select(#[from] SelectError),
}

fn format_failures(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(id, why)| format!("{id}: {why}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl DeliveryError {
    /// Process exit code for the `get` command.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Denied { .. } => 2,
            Self::NotFound { .. } => 3,
            Self::Exhausted(_) => 4,
            Self::Select(_) => 1,
        }
    }

    pub fn status(&self) -> Option<StatusCode> {
        match self {
            Self::Denied { code, .. } => Some(*code),
            Self::NotFound { .. } => Some(StatusCode::NotFound),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchOptions {
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            timeout: net::DEFAULT_TIMEOUT,
        }
    }
}

/// Outcome of asking one cache.
enum Attempt {
    Delivered(Fetched),
    Stop(DeliveryError),
    Failover(String),
}

fn try_cache(cache: &CacheSpec, request: &Request, timeout: Duration) -> Attempt {
    let started = Instant::now();
    let response = match net::exchange(&cache.endpoint, request, timeout) {
        Ok(r) => r,
        Err(NetError::Connect { source, .. }) => return Attempt::Failover(format!("connect: {source}")),
        Err(e) => return Attempt::Failover(e.to_string()),
    };
    let elapsed = started.elapsed().as_secs_f64().max(1e-6);
    match response.code {
        StatusCode::Ok => {
            let cache_status = match response.x_cache() {
                Some("HIT") => CacheStatus::Hit,
                _ => CacheStatus::Miss,
            };
            Attempt::Delivered(Fetched {
                rate_bytes_per_s: response.body.len() as f64 / elapsed,
                bytes: response.body,
                served_by: cache.id.clone(),
                cache_status,
            })
        }
        StatusCode::NotFound => Attempt::Stop(DeliveryError::NotFound {
            cache: cache.id.clone(),
        }),
        code @ (StatusCode::Unauthorized | StatusCode::Forbidden) => Attempt::Stop(DeliveryError::Denied {
            cache: cache.id.clone(),
            code,
        }),
        code => Attempt::Failover(format!("status {code}")),
    }
}

/// Fetches `path` from the nearest cache that can deliver it. 4xx answers
/// end the attempt; connection failures and 5xx move on to the next cache.
pub fn fetch(
    path: &ObjectPath,
    token: Option<&str>,
    at: GeoPoint,
    topology: &FederationTopology,
    options: FetchOptions,
) -> Result<Fetched, DeliveryError> {
    let order = nearest_caches(at, &topology.caches)?;
    let mut request = Request::get(path.clone());
    if let Some(token) = token {
        request = request.with_bearer(token);
    }
    let mut failures = Vec::new();
    for id in order {
        let cache = topology.cache(&id).expect("ids come from the topology");
        match try_cache(cache, &request, options.timeout) {
            Attempt::Delivered(fetched) => return Ok(fetched),
            Attempt::Stop(err) => return Err(err),
            Attempt::Failover(why) => failures.push((id, why)),
        }
    }
    Err(DeliveryError::Exhausted(failures))
}

/// Single attempt against one named cache, without failover.
pub fn fetch_via(
    cache: &CacheSpec,
    path: &ObjectPath,
    token: Option<&str>,
    options: FetchOptions,
) -> Result<Fetched, DeliveryError> {
    let mut request = Request::get(path.clone());
    if let Some(token) = token {
        request = request.with_bearer(token);
    }
    match try_cache(cache, &request, options.timeout) {
        Attempt::Delivered(f) => Ok(f),
        Attempt::Stop(e) => Err(e),
        Attempt::Failover(why) => Err(DeliveryError::Exhausted(vec![(cache.id.clone(), why)])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn cache(id: &str, lat: f64, lon: f64) -> CacheSpec {
        CacheSpec {
            id: id.into(),
            endpoint: "127.0.0.1:1".into(),
            latitude: lat,
            longitude: lon,
            capacity_bytes: 1,
            disk_dir: Default::default(),
        }
    }

    #[test]
    fn distance_spot_values() {
        assert_eq!(great_circle_km(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        let quarter = great_circle_km(pt(0.0, 0.0), pt(90.0, 0.0));
        assert!((quarter - 10_007.54).abs() < 0.01, "{quarter}");
        // Reference from an atan2/cross-product great-circle route.
        let sdsc_unl = great_circle_km(pt(32.88, -117.23), pt(40.82, -96.70));
        assert!((sdsc_unl - 2022.17).abs() < 1.0, "{sdsc_unl}");
    }

    #[test]
    fn coordinates_are_validated() {
        assert_eq!(GeoPoint::new(91.0, 0.0), Err(GeoError::Latitude(91.0)));
        assert_eq!(GeoPoint::new(0.0, -180.5), Err(GeoError::Longitude(-180.5)));
        assert_eq!("32.88,-117.23".parse::<GeoPoint>().unwrap(), pt(32.88, -117.23));
        assert!("32.88".parse::<GeoPoint>().is_err());
    }

    #[test]
    fn ordering_examples() {
        assert_eq!(nearest_caches(pt(0.0, 0.0), &[cache("only", 10.0, 10.0)]).unwrap(), ["only"]);
        let tied = [cache("b", 5.0, 5.0), cache("a", 5.0, 5.0)];
        assert_eq!(nearest_caches(pt(0.0, 0.0), &tied).unwrap(), ["a", "b"]);
        assert_eq!(nearest_caches(pt(0.0, 0.0), &[]), Err(SelectError::NoCaches));
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (-90.0..=90.0f64, -180.0..=180.0f64).prop_map(|(lat, lon)| pt(lat, lon))
    }

    proptest! {
        #[test]
        fn metric_properties(a in point(), b in point(), c in point()) {
            prop_assert_eq!(great_circle_km(a, a), 0.0);
            prop_assert!((great_circle_km(a, b) - great_circle_km(b, a)).abs() < 1e-9);
            prop_assert!(great_circle_km(a, c) <= great_circle_km(a, b) + great_circle_km(b, c) + 1e-6);
        }

        #[test]
        fn ordering_is_a_permutation(client in point(), coords in proptest::collection::vec(point(), 1..20)) {
            let caches: Vec<_> = coords.iter().enumerate().map(|(i, p)| cache(&format!("c{i:02}"), p.lat, p.lon)).collect();
            let mut order = nearest_caches(client, &caches).unwrap();
            let dists: Vec<f64> = order.iter().map(|id| {
                let c = caches.iter().find(|c| &c.id == id).unwrap();
                great_circle_km(client, GeoPoint::of_cache(c).unwrap())
            }).collect();
            prop_assert!(dists.windows(2).all(|w| w[0] <= w[1]));
            order.sort();
            let mut ids: Vec<_> = caches.iter().map(|c| c.id.clone()).collect();
            ids.sort();
            prop_assert_eq!(order, ids);
        }
    }
}
