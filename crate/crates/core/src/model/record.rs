use serde::{Deserialize, Serialize};

use super::path::ObjectPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "f")]
    File,
    #[serde(rename = "g")]
    Cache,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::File => "f",
            Self::Cache => "g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f" => Some(Self::File),
            "g" => Some(Self::Cache),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Cache,
    Origin,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cache => "cache",
            Self::Origin => "origin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cache" => Some(Self::Cache),
            "origin" => Some(Self::Origin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Open,
    Close,
    Hit,
    Miss,
    Evict,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::Close => "close",
            Self::Hit => "hit",
            Self::Miss => "miss",
            Self::Evict => "evict",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(Self::Open),
            "close" => Some(Self::Close),
            "hit" => Some(Self::Hit),
            "miss" => Some(Self::Miss),
            "evict" => Some(Self::Evict),
            _ => None,
        }
    }

    pub fn stream(self) -> Stream {
        match self {
            Self::Open | Self::Close => Stream::File,
            Self::Hit | Self::Miss | Self::Evict => Stream::Cache,
        }
    }
}

/// One f-stream (file access) or g-stream (cache behaviour) event.
///
/// Field order here is the canonical JSON field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub stream: Stream,
    pub ts_ms: u64,
    pub host: String,
    pub component: Component,
    pub event: Event,
    pub path: ObjectPath,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    pub client: String,
    pub xfer_id: String,
}

impl MonitorRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        event: Event,
        ts_ms: u64,
        host: &str,
        component: Component,
        path: &ObjectPath,
        bytes: u64,
        client: &str,
        xfer_id: &str,
    ) -> Self {
        Self {
            stream: event.stream(),
            ts_ms,
            host: host.to_owned(),
            component,
            event,
            path: path.clone(),
            bytes,
            duration_ms: None,
            client: client.to_owned(),
            xfer_id: xfer_id.to_owned(),
        }
    }

    pub fn with_duration(mut self, duration_ms: u64) -> Self {
        self.duration_ms = Some(duration_ms);
        self
    }

    /// Stream/event pairing holds and `duration_ms` is present exactly on
    /// f-close records.
    pub fn is_consistent(&self) -> bool {
        self.event.stream() == self.stream
            && self.duration_ms.is_some() == (self.event == Event::Close)
    }

    /// Identity used by the collector to drop redelivered records.
    pub fn dedup_key(&self) -> String {
        match self.stream {
            Stream::File => format!("f\u{1f}{}\u{1f}{}\u{1f}{}", self.host, self.xfer_id, self.event.as_str()),
            Stream::Cache => format!(
                "g\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
                self.host,
                self.event.as_str(),
                self.ts_ms,
                self.path,
                self.xfer_id
            ),
        }
    }
}
