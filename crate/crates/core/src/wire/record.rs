//! Monitoring datagram codec: one canonical JSON object per datagram.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{Component, Event, MonitorRecord, ObjectPath, Stream};

pub const MAX_DATAGRAM: usize = 8192;

const FIELDS: [&str; 10] = [
    "stream",
    "ts_ms",
    "host",
    "component",
    "event",
    "path",
    "bytes",
    "duration_ms",
    "client",
    "xfer_id",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("record exceeds {MAX_DATAGRAM} bytes ({0})")]
    Oversize(usize),
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("record is not a JSON object")]
    NotObject,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("field {0:?} has the wrong type")]
    WrongType(&'static str),
    #[error("unknown stream tag {0:?}")]
    UnknownStream(String),
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("event {event:?} does not belong to stream {stream:?}")]
    StreamEventMismatch { stream: String, event: String },
    #[error("duration_ms must be present exactly on close events")]
    DurationMismatch,
    #[error("invalid path: {0}")]
    BadPath(String),
}

impl CodecError {
    pub fn class(&self) -> &'static str {
        match self {
            Self::Oversize(_) => "oversize",
            Self::InvalidJson(_) | Self::NotObject => "invalid-json",
            Self::MissingField(_) => "missing-field",
            Self::UnknownField(_) => "unknown-field",
            Self::WrongType(_) => "wrong-type",
            Self::UnknownStream(_) => "unknown-stream",
            Self::UnknownEvent(_) | Self::UnknownComponent(_) => "unknown-value",
            Self::StreamEventMismatch { .. } | Self::DurationMismatch => "stream-event-mismatch",
            Self::BadPath(_) => "bad-path",
        }
    }
}

pub fn encode_monitor_record(record: &MonitorRecord) -> Result<Vec<u8>, CodecError> {
    if record.event.stream() != record.stream {
        return Err(CodecError::StreamEventMismatch {
            stream: record.stream.as_str().into(),
            event: record.event.as_str().into(),
        });
    }
    if !record.is_consistent() {
        return Err(CodecError::DurationMismatch);
    }
    let bytes = serde_json::to_vec(record).expect("records serialize");
    if bytes.len() > MAX_DATAGRAM {
        return Err(CodecError::Oversize(bytes.len()));
    }
    Ok(bytes)
}

fn take_str<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a str, CodecError> {
    obj.get(name)
        .ok_or(CodecError::MissingField(name))?
        .as_str()
        .ok_or(CodecError::WrongType(name))
}

fn take_u64(obj: &Map<String, Value>, name: &'static str) -> Result<u64, CodecError> {
    obj.get(name)
        .ok_or(CodecError::MissingField(name))?
        .as_u64()
        .ok_or(CodecError::WrongType(name))
}

pub fn decode_monitor_record(bytes: &[u8]) -> Result<MonitorRecord, CodecError> {
    if bytes.len() > MAX_DATAGRAM {
        return Err(CodecError::Oversize(bytes.len()));
    }
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| CodecError::InvalidJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(CodecError::NotObject);
    };
    if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(CodecError::UnknownField(unknown.clone()));
    }

    let stream_tag = take_str(&obj, "stream")?;
    let stream =
        Stream::parse(stream_tag).ok_or_else(|| CodecError::UnknownStream(stream_tag.into()))?;
    let ts_ms = take_u64(&obj, "ts_ms")?;
    let host = take_str(&obj, "host")?;
    let component_tag = take_str(&obj, "component")?;
    let component = Component::parse(component_tag)
        .ok_or_else(|| CodecError::UnknownComponent(component_tag.into()))?;
    let event_tag = take_str(&obj, "event")?;
    let event = Event::parse(event_tag).ok_or_else(|| CodecError::UnknownEvent(event_tag.into()))?;
    if event.stream() != stream {
        return Err(CodecError::StreamEventMismatch {
            stream: stream_tag.into(),
            event: event_tag.into(),
        });
    }
    let path_raw = take_str(&obj, "path")?;
    let path = ObjectPath::parse(path_raw).map_err(|e| CodecError::BadPath(e.to_string()))?;
    let bytes_field = take_u64(&obj, "bytes")?;
    let duration_ms = match obj.get("duration_ms") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or(CodecError::WrongType("duration_ms"))?),
    };
    if duration_ms.is_some() != (event == Event::Close) {
        return Err(CodecError::DurationMismatch);
    }
    let client = take_str(&obj, "client")?;
    let xfer_id = take_str(&obj, "xfer_id")?;

    Ok(MonitorRecord {
        stream,
        ts_ms,
        host: host.to_owned(),
        component,
        event,
        path,
        bytes: bytes_field,
        duration_ms,
        client: client.to_owned(),
        xfer_id: xfer_id.to_owned(),
    })
}
