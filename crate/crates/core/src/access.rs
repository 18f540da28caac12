//! Request authorization shared by origins and caches.

use std::sync::{Arc, RwLock};

use crate::model::{verify_token, NamespaceSpec, NamespaceTable, ObjectPath, Secret, Verdict};
use crate::wire::{Request, StatusCode};

/// Namespace table shared by a running service. The harness swaps entries
/// at runtime to inject faults.
#[derive(Debug, Clone, Default)]
pub struct SharedNamespaces(Arc<RwLock<NamespaceTable>>);

impl SharedNamespaces {
    pub fn new(table: NamespaceTable) -> Self {
        Self(Arc::new(RwLock::new(table)))
    }

    pub fn resolve(&self, path: &ObjectPath) -> Option<NamespaceSpec> {
        self.0.read().unwrap().resolve(path).cloned()
    }

    pub fn snapshot(&self) -> NamespaceTable {
        self.0.read().unwrap().clone()
    }

    /// Replaces the secret of `prefix`; returns the previous one.
    pub fn replace_secret(&self, prefix: &ObjectPath, secret: Secret) -> Option<Secret> {
        let mut table = self.0.write().unwrap();
        let ns = table.get_mut(prefix)?;
        ns.secret.replace(secret)
    }
}

/// 401 when a protected path carries no credentials, 403 when the
/// credentials do not grant read access.
pub fn authorize(
    request: &Request,
    namespace: &NamespaceSpec,
    path: &ObjectPath,
    now_secs: u64,
) -> Result<(), StatusCode> {
    if namespace.public {
        return Ok(());
    }
    let token = match request.bearer() {
        None => return Err(StatusCode::Unauthorized),
        Some(None) => return Err(StatusCode::Forbidden),
        Some(Some(token)) => token,
    };
    let secret = namespace.secret.as_ref().map(Secret::as_bytes).unwrap_or_default();
    match verify_token(token, secret, path, now_secs) {
        Verdict::Allow => Ok(()),
        Verdict::Deny(_) => Err(StatusCode::Forbidden),
    }
}
