use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::path::{ObjectPath, PathError};

/// Shared secret of a protected namespace. Serialized as standard base64.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(Vec<u8>);

impl Secret {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Secret(<{} bytes>)", self.0.len())
    }
}

impl Serialize for Secret {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Secret {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        STANDARD
            .decode(raw.as_bytes())
            .map(Secret)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginSpec {
    pub id: String,
    pub endpoint: String,
    pub root_dir: PathBuf,
    pub namespaces: Vec<ObjectPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSpec {
    pub id: String,
    pub endpoint: String,
    pub latitude: f64,
    pub longitude: f64,
    pub capacity_bytes: u64,
    pub disk_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamespaceSpec {
    pub prefix: ObjectPath,
    pub public: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<Secret>,
}

impl NamespaceSpec {
    pub fn public(prefix: ObjectPath) -> Self {
        Self {
            prefix,
            public: true,
            secret: None,
        }
    }

    pub fn protected(prefix: ObjectPath, secret: impl Into<Vec<u8>>) -> Self {
        Self {
            prefix,
            public: false,
            secret: Some(Secret::new(secret)),
        }
    }
}

/// Addresses of the monitoring pipeline, used by health checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringSpec {
    pub shoveler_udp: String,
    pub shoveler_admin: String,
    pub collector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationTopology {
    pub origins: Vec<OriginSpec>,
    pub caches: Vec<CacheSpec>,
    #[serde(rename = "redirector")]
    pub redirector_endpoint: String,
    pub namespaces: Vec<NamespaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitoring: Option<MonitoringSpec>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("service id is empty")]
    EmptyId,
    #[error("duplicate service id {0:?}")]
    DuplicateId(String),
    #[error("namespace prefix {0} is registered more than once")]
    DuplicatePrefix(ObjectPath),
    #[error("namespace prefix {0} is not claimed by any origin")]
    UnclaimedNamespace(ObjectPath),
    #[error("namespace prefix {prefix} is claimed by both {first} and {second}")]
    MultipleOwners {
        prefix: ObjectPath,
        first: String,
        second: String,
    },
    #[error("origin {origin} claims unregistered namespace {prefix}")]
    UnknownNamespace { origin: String, prefix: ObjectPath },
    #[error("origin {0} claims no namespaces")]
    NoNamespaces(String),
    #[error("protected namespace {0} has no secret")]
    MissingSecret(ObjectPath),
    #[error("public namespace {0} carries a secret")]
    UnexpectedSecret(ObjectPath),
    #[error("cache {0} has coordinates out of range")]
    BadCoordinates(String),
    #[error("cache {0} has zero capacity")]
    ZeroCapacity(String),
    #[error("endpoint {0:?} is not host:port")]
    BadEndpoint(String),
    #[error("invalid path: {0}")]
    Path(#[from] PathError),
    #[error("reading topology: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing topology: {0}")]
    Json(#[from] serde_json::Error),
}

impl TopologyError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyId => "empty-id",
            Self::DuplicateId(_) => "duplicate-id",
            Self::DuplicatePrefix(_) => "duplicate-prefix",
            Self::UnclaimedNamespace(_) => "unclaimed-namespace",
            Self::MultipleOwners { .. } => "multiple-owners",
            Self::UnknownNamespace { .. } => "unknown-namespace",
            Self::NoNamespaces(_) => "origin-without-namespaces",
            Self::MissingSecret(_) => "missing-secret",
            Self::UnexpectedSecret(_) => "unexpected-secret",
            Self::BadCoordinates(_) => "bad-coordinates",
            Self::ZeroCapacity(_) => "zero-capacity",
            Self::BadEndpoint(_) => "bad-endpoint",
            Self::Path(_) => "bad-path",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }
}

pub(crate) fn check_endpoint(endpoint: &str) -> Result<(), TopologyError> {
    match endpoint.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(()),
        _ => Err(TopologyError::BadEndpoint(endpoint.to_owned())),
    }
}

impl FederationTopology {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let topology: Self = serde_json::from_str(text)?;
        topology.validate()?;
        Ok(topology)
    }

    /// Loads and validates a topology file. Relative `root_dir` and
    /// `disk_dir` entries are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let path = path.as_ref();
        let mut topology = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            topology.rebase_dirs(base);
        }
        Ok(topology)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn rebase_dirs(&mut self, base: &Path) {
        for origin in &mut self.origins {
            if origin.root_dir.is_relative() {
                origin.root_dir = base.join(&origin.root_dir);
            }
        }
        for cache in &mut self.caches {
            if cache.disk_dir.is_relative() {
                cache.disk_dir = base.join(&cache.disk_dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut ids = HashSet::new();
        let all_ids = self
            .origins
            .iter()
            .map(|o| &o.id)
            .chain(self.caches.iter().map(|c| &c.id));
        for id in all_ids {
            if id.is_empty() {
                return Err(TopologyError::EmptyId);
            }
            if !ids.insert(id.as_str()) {
                return Err(TopologyError::DuplicateId(id.clone()));
            }
        }

        check_endpoint(&self.redirector_endpoint)?;

        let mut prefixes = HashSet::new();
        for ns in &self.namespaces {
            if !prefixes.insert(&ns.prefix) {
                return Err(TopologyError::DuplicatePrefix(ns.prefix.clone()));
            }
            match (&ns.secret, ns.public) {
                (None, false) => return Err(TopologyError::MissingSecret(ns.prefix.clone())),
                (Some(s), false) if s.as_bytes().is_empty() => {
                    return Err(TopologyError::MissingSecret(ns.prefix.clone()))
                }
                (Some(_), true) => {
                    return Err(TopologyError::UnexpectedSecret(ns.prefix.clone()))
                }
                _ => {}
            }
        }

        let mut owners: HashMap<&ObjectPath, &str> = HashMap::new();
        for origin in &self.origins {
            check_endpoint(&origin.endpoint)?;
            if origin.namespaces.is_empty() {
                return Err(TopologyError::NoNamespaces(origin.id.clone()));
            }
            for prefix in &origin.namespaces {
                if !prefixes.contains(prefix) {
                    return Err(TopologyError::UnknownNamespace {
                        origin: origin.id.clone(),
                        prefix: prefix.clone(),
                    });
                }
                if let Some(first) = owners.insert(prefix, &origin.id) {
                    return Err(TopologyError::MultipleOwners {
                        prefix: prefix.clone(),
                        first: first.to_owned(),
                        second: origin.id.clone(),
                    });
                }
            }
        }
        for ns in &self.namespaces {
            if !owners.contains_key(&ns.prefix) {
                return Err(TopologyError::UnclaimedNamespace(ns.prefix.clone()));
            }
        }

        for cache in &self.caches {
            check_endpoint(&cache.endpoint)?;
            if !(-90.0..=90.0).contains(&cache.latitude)
                || !(-180.0..=180.0).contains(&cache.longitude)
            {
                return Err(TopologyError::BadCoordinates(cache.id.clone()));
            }
            if cache.capacity_bytes == 0 {
                return Err(TopologyError::ZeroCapacity(cache.id.clone()));
            }
        }
        if let Some(m) = &self.monitoring {
            check_endpoint(&m.shoveler_udp)?;
            check_endpoint(&m.shoveler_admin)?;
            check_endpoint(&m.collector)?;
        }
        Ok(())
    }

    pub fn origin(&self, id: &str) -> Option<&OriginSpec> {
        self.origins.iter().find(|o| o.id == id)
    }

    pub fn cache(&self, id: &str) -> Option<&CacheSpec> {
        self.caches.iter().find(|c| c.id == id)
    }

    pub fn namespace(&self, prefix: &ObjectPath) -> Option<&NamespaceSpec> {
        self.namespaces.iter().find(|ns| &ns.prefix == prefix)
    }

    pub fn owner_of(&self, prefix: &ObjectPath) -> Option<&OriginSpec> {
        self.origins.iter().find(|o| o.namespaces.contains(prefix))
    }

    pub fn namespace_table(&self) -> NamespaceTable {
        NamespaceTable::new(self.namespaces.clone())
    }
}

/// Registered namespaces with longest-prefix lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamespaceTable {
    specs: Vec<NamespaceSpec>,
}

impl NamespaceTable {
    pub fn new(specs: Vec<NamespaceSpec>) -> Self {
        Self { specs }
    }

    pub fn specs(&self) -> &[NamespaceSpec] {
        &self.specs
    }

    pub fn resolve(&self, path: &ObjectPath) -> Option<&NamespaceSpec> {
        longest_match(path, &self.specs)
    }

    pub fn get_mut(&mut self, prefix: &ObjectPath) -> Option<&mut NamespaceSpec> {
        self.specs.iter_mut().find(|ns| &ns.prefix == prefix)
    }
}

fn longest_match<'a>(path: &ObjectPath, table: &'a [NamespaceSpec]) -> Option<&'a NamespaceSpec> {
    table
        .iter()
        .filter(|ns| path.is_under(&ns.prefix))
        .max_by_key(|ns| ns.prefix.as_str().len())
}

/// Finds the namespace whose prefix is the longest component-boundary
/// prefix of `path`.
pub fn resolve_namespace<'a>(
    path: &str,
    table: &'a [NamespaceSpec],
) -> Result<Option<&'a NamespaceSpec>, PathError> {
    let path = ObjectPath::parse(path)?;
    Ok(longest_match(&path, table))
}
