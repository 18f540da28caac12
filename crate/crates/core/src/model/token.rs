//! Bearer tokens: an HMAC-SHA256 signature over a compact JSON claim set.
//!
//! Wire form is `base64url(payload) "." base64url(signature)`, both without
//! padding. The signing key is the secret of the protected namespace the
//! token is meant for.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use super::path::ObjectPath;

type HmacSha256 = Hmac<Sha256>;

const SCOPE_READ: &str = "read:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("signing secret is empty")]
    EmptySecret,
    #[error("malformed scope {0:?}; expected read:<absolute prefix>")]
    BadScope(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Claims {
    sub: String,
    scopes: Vec<String>,
    exp: u64,
}

/// Decoded token contents, available after [`AccessToken::decode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessToken {
    pub subject: String,
    pub scopes: Vec<ObjectPath>,
    pub expiry: u64,
    pub signature: [u8; 32],
    payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    Malformed,
    BadSignature,
    Expired,
    OutOfScope,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Malformed => "malformed",
            Self::BadSignature => "bad-signature",
            Self::Expired => "expired",
            Self::OutOfScope => "out-of-scope",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny(DenyReason),
}

fn parse_scope(scope: &str) -> Option<ObjectPath> {
    scope
        .strip_prefix(SCOPE_READ)
        .and_then(|prefix| ObjectPath::parse(prefix).ok())
}

fn sign(secret: &[u8], payload: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(payload);
    mac
}

pub fn mint_token<S: AsRef<str>>(
    subject: &str,
    scopes: &[S],
    expiry: u64,
    secret: &[u8],
) -> Result<String, TokenError> {
    if secret.is_empty() {
        return Err(TokenError::EmptySecret);
    }
    let scopes: Vec<String> = scopes.iter().map(|s| s.as_ref().to_owned()).collect();
    if let Some(bad) = scopes.iter().find(|s| parse_scope(s).is_none()) {
        return Err(TokenError::BadScope(bad.clone()));
    }
    let claims = Claims {
        sub: subject.to_owned(),
        scopes,
        exp: expiry,
    };
    let payload = serde_json::to_vec(&claims).expect("claims serialize");
    let signature = sign(secret, &payload).finalize().into_bytes();
    Ok(format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(&payload),
        URL_SAFE_NO_PAD.encode(signature)
    ))
}

impl AccessToken {
    /// Parses the wire form without checking the signature.
    pub fn decode(wire: &str) -> Option<Self> {
        let (payload_b64, sig_b64) = wire.split_once('.')?;
        if sig_b64.contains('.') {
            return None;
        }
        let payload = URL_SAFE_NO_PAD.decode(payload_b64).ok()?;
        let signature: [u8; 32] = URL_SAFE_NO_PAD.decode(sig_b64).ok()?.try_into().ok()?;
        let claims: Claims = serde_json::from_slice(&payload).ok()?;
        let scopes = claims
            .scopes
            .iter()
            .map(|s| parse_scope(s))
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            subject: claims.sub,
            scopes,
            expiry: claims.exp,
            signature,
            payload,
        })
    }

    pub fn signature_valid(&self, secret: &[u8]) -> bool {
        !secret.is_empty() && sign(secret, &self.payload).verify_slice(&self.signature).is_ok()
    }

    pub fn covers(&self, path: &ObjectPath) -> bool {
        self.scopes.iter().any(|prefix| path.is_under(prefix))
    }
}

/// Checks signature, then expiry (`expiry > now`), then scope.
pub fn verify_token(wire: &str, secret: &[u8], path: &ObjectPath, now_secs: u64) -> Verdict {
    let Some(token) = AccessToken::decode(wire) else {
        return Verdict::Deny(DenyReason::Malformed);
    };
    if !token.signature_valid(secret) {
        return Verdict::Deny(DenyReason::BadSignature);
    }
    if token.expiry <= now_secs {
        return Verdict::Deny(DenyReason::Expired);
    }
    if !token.covers(path) {
        return Verdict::Deny(DenyReason::OutOfScope);
    }
    Verdict::Allow
}
