//! Domain types shared by every service.

mod path;
mod record;
mod token;
mod topology;

pub use path::{ObjectPath, PathError};
pub use record::{Component, Event, MonitorRecord, Stream};
pub use token::{mint_token, verify_token, AccessToken, DenyReason, TokenError, Verdict};
pub use topology::{
    resolve_namespace, CacheSpec, FederationTopology, MonitoringSpec, NamespaceSpec,
    NamespaceTable, OriginSpec, Secret, TopologyError,
};
pub(crate) use topology::check_endpoint;
