use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const MAX_PATH_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path is empty")]
    Empty,
    #[error("path {0:?} is not absolute")]
    NotAbsolute(String),
    #[error("path {0:?} has an empty component or trailing slash")]
    EmptyComponent(String),
    #[error("path {0:?} contains a dot component")]
    DotComponent(String),
    #[error("path {0:?} contains a forbidden character")]
    ForbiddenChar(String),
    #[error("path exceeds {MAX_PATH_LEN} bytes")]
    TooLong,
}

/// Absolute, slash-separated object path.
///
/// Parsing rejects empty components, `.`/`..` components, whitespace,
/// control characters and backslashes, so a valid path can always be joined
/// onto a directory without escaping it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectPath(String);

impl ObjectPath {
    pub fn parse(raw: &str) -> Result<Self, PathError> {
        if raw.is_empty() {
            return Err(PathError::Empty);
        }
        if raw.len() > MAX_PATH_LEN {
            return Err(PathError::TooLong);
        }
        if !raw.starts_with('/') {
            return Err(PathError::NotAbsolute(raw.to_owned()));
        }
        if raw
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || c == '\\')
        {
            return Err(PathError::ForbiddenChar(raw.to_owned()));
        }
        if raw == "/" {
            return Ok(Self(raw.to_owned()));
        }
        for component in raw[1..].split('/') {
            match component {
                "" => return Err(PathError::EmptyComponent(raw.to_owned())),
                "." | ".." => return Err(PathError::DotComponent(raw.to_owned())),
                _ => {}
            }
        }
        Ok(Self(raw.to_owned()))
    }

    pub fn root() -> Self {
        Self("/".to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == "/"
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.0.split('/').filter(|c| !c.is_empty())
    }

    /// True when `prefix` equals this path or is an ancestor of it at a
    /// component boundary (`/ligo` covers `/ligo/a` but not `/ligo2`).
    pub fn is_under(&self, prefix: &ObjectPath) -> bool {
        if prefix.is_root() {
            return true;
        }
        match self.0.strip_prefix(prefix.as_str()) {
            Some(rest) => rest.is_empty() || rest.starts_with('/'),
            None => false,
        }
    }

    pub fn join(&self, name: &str) -> Result<Self, PathError> {
        if self.is_root() {
            Self::parse(&format!("/{name}"))
        } else {
            Self::parse(&format!("{}/{name}", self.0))
        }
    }
}

impl fmt::Display for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ObjectPath {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl std::str::FromStr for ObjectPath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for ObjectPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ObjectPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Self::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> ObjectPath {
        ObjectPath::parse(s).unwrap()
    }

    #[test]
    fn accepts_plain_paths() {
        assert_eq!(p("/ligo/frames/O3/a.gwf").as_str(), "/ligo/frames/O3/a.gwf");
        assert!(p("/").is_root());
        assert_eq!(p("/a/b").components().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn rejects_bad_paths() {
        assert_eq!(ObjectPath::parse(""), Err(PathError::Empty));
        assert!(matches!(ObjectPath::parse("ligo/a"), Err(PathError::NotAbsolute(_))));
        assert!(matches!(ObjectPath::parse("/ligo/"), Err(PathError::EmptyComponent(_))));
        assert!(matches!(ObjectPath::parse("//etc/passwd"), Err(PathError::EmptyComponent(_))));
        assert!(matches!(ObjectPath::parse("/a/../b"), Err(PathError::DotComponent(_))));
        assert!(matches!(ObjectPath::parse("/a/./b"), Err(PathError::DotComponent(_))));
        assert!(matches!(ObjectPath::parse("/a b"), Err(PathError::ForbiddenChar(_))));
        assert!(matches!(ObjectPath::parse("/a\\..\\b"), Err(PathError::ForbiddenChar(_))));
        assert!(matches!(ObjectPath::parse("/a\0"), Err(PathError::ForbiddenChar(_))));
    }

    #[test]
    fn boundary_matching() {
        assert!(p("/ligo/a").is_under(&p("/ligo")));
        assert!(p("/ligo").is_under(&p("/ligo")));
        assert!(!p("/ligo2/x").is_under(&p("/ligo")));
        assert!(p("/anything").is_under(&ObjectPath::root()));
    }
}
