//! Request/response line protocol.
//!
//! ```text
//! request  = METHOD SP path SP "OSDF-MINI/1" CRLF *(header CRLF) CRLF
//! response = "OSDF-MINI/1" SP code SP reason CRLF *(header CRLF) CRLF body
//! header   = name ":" SP value        ; name = 1*[A-Za-z0-9-]
//! ```

use std::fmt;
use std::io::{BufRead, Read};

use thiserror::Error;

use crate::model::ObjectPath;

pub const VERSION: &str = "OSDF-MINI/1";
/// Upper bound on the request/response head (start line plus headers).
pub const MAX_HEAD: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolErrorKind {
    UnknownMethod,
    BadVersion,
    BadStartLine,
    BadPath,
    MalformedHeader,
    DuplicateAuthorization,
    BadStatus,
    MissingHeader(&'static str),
    LengthMismatch,
    UnexpectedBody,
    Incomplete,
    HeadTooLarge,
    NotUtf8,
}

impl fmt::Display for ProtocolErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownMethod => f.write_str("unknown method"),
            Self::BadVersion => f.write_str("bad version tag"),
            Self::BadStartLine => f.write_str("malformed start line"),
            Self::BadPath => f.write_str("invalid object path"),
            Self::MalformedHeader => f.write_str("malformed header"),
            Self::DuplicateAuthorization => f.write_str("more than one Authorization header"),
            Self::BadStatus => f.write_str("unknown status code"),
            Self::MissingHeader(name) => write!(f, "missing mandatory header {name}"),
            Self::LengthMismatch => f.write_str("body length does not match Content-Length"),
            Self::UnexpectedBody => f.write_str("unexpected body bytes"),
            Self::Incomplete => f.write_str("head not terminated by CRLF CRLF"),
            Self::HeadTooLarge => f.write_str("head too large"),
            Self::NotUtf8 => f.write_str("head is not UTF-8"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {kind}")]
pub struct ProtocolError {
    pub offset: usize,
    pub kind: ProtocolErrorKind,
}

impl ProtocolError {
    fn at(offset: usize, kind: ProtocolErrorKind) -> Self {
        Self { offset, kind }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Locate,
    Stats,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Get => "GET",
            Self::Locate => "LOCATE",
            Self::Stats => "STATS",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "GET" => Some(Self::Get),
            "LOCATE" => Some(Self::Locate),
            "STATS" => Some(Self::Stats),
            _ => None,
        }
    }
}

/// Ordered header list with case-insensitive lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn count(&self, name: &str) -> usize {
        self.0.iter().filter(|(n, _)| n.eq_ignore_ascii_case(name)).count()
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.push((name.into(), value.into()));
    }

    /// Replaces every header called `name` with a single entry.
    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
        self.0.push((name.to_owned(), value.into()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn valid_header_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

pub(crate) fn valid_header_value(value: &str) -> bool {
    !value.chars().any(|c| c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    /// Absent only for STATS.
    pub path: Option<ObjectPath>,
    pub headers: Headers,
}

impl Request {
    pub fn get(path: ObjectPath) -> Self {
        Self {
            method: Method::Get,
            path: Some(path),
            headers: Headers::new(),
        }
    }

    pub fn locate(path: ObjectPath) -> Self {
        Self {
            method: Method::Locate,
            path: Some(path),
            headers: Headers::new(),
        }
    }

    pub fn stats() -> Self {
        Self {
            method: Method::Stats,
            path: None,
            headers: Headers::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push(name, value);
        self
    }

    pub fn with_bearer(self, token: &str) -> Self {
        self.with_header("Authorization", format!("Bearer {token}"))
    }

    /// Token carried in `Authorization: Bearer <token>`. `Some(None)` means
    /// the header is present but not a bearer credential.
    pub fn bearer(&self) -> Option<Option<&str>> {
        self.headers
            .get("Authorization")
            .map(|v| v.strip_prefix("Bearer ").filter(|t| !t.is_empty()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let path = match (self.method, &self.path) {
            (Method::Stats, None) => "",
            (Method::Get | Method::Locate, Some(p)) => p.as_str(),
            _ => return Err(ProtocolError::at(0, ProtocolErrorKind::BadPath)),
        };
        let mut out = format!("{} {} {VERSION}\r\n", self.method.as_str(), path);
        encode_headers(&self.headers, &mut out)?;
        if self.headers.count("Authorization") > 1 {
            return Err(ProtocolError::at(0, ProtocolErrorKind::DuplicateAuthorization));
        }
        out.push_str("\r\n");
        Ok(out.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let head_len = find_head_end(bytes)?;
        if head_len != bytes.len() {
            return Err(ProtocolError::at(head_len, ProtocolErrorKind::UnexpectedBody));
        }
        parse_request_head(&bytes[..head_len])
    }

    pub fn read_from<R: BufRead>(reader: &mut R) -> Result<Self, WireError> {
        let head = read_head(reader)?;
        Ok(parse_request_head(&head)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatusCode {
    Ok,
    Found,
    Unauthorized,
    Forbidden,
    NotFound,
    InternalError,
}

impl StatusCode {
    pub fn code(self) -> u16 {
        match self {
            Self::Ok => 200,
            Self::Found => 302,
            Self::Unauthorized => 401,
            Self::Forbidden => 403,
            Self::NotFound => 404,
            Self::InternalError => 500,
        }
    }

    pub fn reason(self) -> &'static str {
        match self {
            Self::Ok => "OK",
            Self::Found => "Found",
            Self::Unauthorized => "Unauthorized",
            Self::Forbidden => "Forbidden",
            Self::NotFound => "Not Found",
            Self::InternalError => "Internal Error",
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            200 => Some(Self::Ok),
            302 => Some(Self::Found),
            401 => Some(Self::Unauthorized),
            403 => Some(Self::Forbidden),
            404 => Some(Self::NotFound),
            500 => Some(Self::InternalError),
            _ => None,
        }
    }

    pub fn is_client_error(self) -> bool {
        matches!(self, Self::Unauthorized | Self::Forbidden | Self::NotFound)
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub code: StatusCode,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Response {
    pub fn ok(body: Vec<u8>) -> Self {
        let mut headers = Headers::new();
        headers.push("Content-Length", body.len().to_string());
        Self {
            code: StatusCode::Ok,
            headers,
            body,
        }
    }

    pub fn redirect(location: &str) -> Self {
        let mut headers = Headers::new();
        headers.push("Location", location);
        Self {
            code: StatusCode::Found,
            headers,
            body: Vec::new(),
        }
    }

    pub fn empty(code: StatusCode) -> Self {
        Self {
            code,
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push(name, value);
        self
    }

    pub fn x_cache(&self) -> Option<&str> {
        self.headers.get("X-Cache")
    }

    pub fn location(&self) -> Option<&str> {
        self.headers.get("Location")
    }

    fn content_length(&self) -> Option<&str> {
        self.headers.get("Content-Length")
    }

    fn check(&self, offset: usize) -> Result<(), ProtocolError> {
        let err = |kind| Err(ProtocolError::at(offset, kind));
        if self.headers.count("Content-Length") > 1 {
            return err(ProtocolErrorKind::MalformedHeader);
        }
        if let Some(len) = self.content_length() {
            match len.parse::<usize>() {
                Ok(n) if n == self.body.len() => {}
                Ok(_) => return err(ProtocolErrorKind::LengthMismatch),
                Err(_) => return err(ProtocolErrorKind::MalformedHeader),
            }
        } else if self.code == StatusCode::Ok {
            return err(ProtocolErrorKind::MissingHeader("Content-Length"));
        }
        if self.code != StatusCode::Ok && !self.body.is_empty() {
            return err(ProtocolErrorKind::UnexpectedBody);
        }
        if self.code == StatusCode::Found && self.location().is_none() {
            return err(ProtocolErrorKind::MissingHeader("Location"));
        }
        if let Some(x) = self.x_cache() {
            if x != "HIT" && x != "MISS" {
                return err(ProtocolErrorKind::MalformedHeader);
            }
        }
        Ok(())
    }

    /// Start line and headers only; the body follows verbatim.
    pub fn encode_head(&self) -> Result<Vec<u8>, ProtocolError> {
        self.check(0)?;
        let mut out = format!("{VERSION} {} {}\r\n", self.code.code(), self.code.reason());
        encode_headers(&self.headers, &mut out)?;
        out.push_str("\r\n");
        Ok(out.into_bytes())
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = self.encode_head()?;
        out.extend_from_slice(&self.body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let head_len = find_head_end(bytes)?;
        let mut response = parse_response_head(&bytes[..head_len])?;
        let declared = declared_length(&response, head_len)?;
        let available = bytes.len() - head_len;
        if available < declared {
            return Err(ProtocolError::at(bytes.len(), ProtocolErrorKind::LengthMismatch));
        }
        if available > declared {
            return Err(ProtocolError::at(head_len + declared, ProtocolErrorKind::UnexpectedBody));
        }
        response.body = bytes[head_len..].to_vec();
        response.check(head_len)?;
        Ok(response)
    }

    pub fn read_from<R: BufRead>(reader: &mut R) -> Result<Self, WireError> {
        let head = read_head(reader)?;
        let mut response = parse_response_head(&head)?;
        let declared = declared_length(&response, head.len())?;
        let mut body = Vec::with_capacity(declared.min(16 << 20));
        let got = reader.by_ref().take(declared as u64).read_to_end(&mut body)?;
        if got < declared {
            return Err(ProtocolError::at(head.len() + got, ProtocolErrorKind::LengthMismatch).into());
        }
        response.body = body;
        response.check(head.len())?;
        Ok(response)
    }
}

fn declared_length(response: &Response, offset: usize) -> Result<usize, ProtocolError> {
    match response.content_length() {
        None => Ok(0),
        Some(v) => v
            .parse()
            .map_err(|_| ProtocolError::at(offset, ProtocolErrorKind::MalformedHeader)),
    }
}

fn encode_headers(headers: &Headers, out: &mut String) -> Result<(), ProtocolError> {
    for (name, value) in headers.iter() {
        if !valid_header_name(name) || !valid_header_value(value) {
            return Err(ProtocolError::at(out.len(), ProtocolErrorKind::MalformedHeader));
        }
        out.push_str(name);
        out.push_str(": ");
        out.push_str(value);
        out.push_str("\r\n");
    }
    Ok(())
}

fn find_head_end(bytes: &[u8]) -> Result<usize, ProtocolError> {
    match bytes.windows(4).position(|w| w == b"\r\n\r\n") {
        Some(i) if i + 4 <= MAX_HEAD => Ok(i + 4),
        Some(_) => Err(ProtocolError::at(MAX_HEAD, ProtocolErrorKind::HeadTooLarge)),
        None if bytes.len() > MAX_HEAD => {
            Err(ProtocolError::at(MAX_HEAD, ProtocolErrorKind::HeadTooLarge))
        }
        None => Err(ProtocolError::at(bytes.len(), ProtocolErrorKind::Incomplete)),
    }
}

fn read_head<R: BufRead>(reader: &mut R) -> Result<Vec<u8>, WireError> {
    let mut head = Vec::new();
    loop {
        let n = reader.by_ref().take((MAX_HEAD - head.len()) as u64).read_until(b'\n', &mut head)?;
        if head.ends_with(b"\r\n\r\n") || head == b"\r\n" {
            return Ok(head);
        }
        if n == 0 {
            return Err(ProtocolError::at(head.len(), ProtocolErrorKind::Incomplete).into());
        }
        if head.len() >= MAX_HEAD {
            return Err(ProtocolError::at(MAX_HEAD, ProtocolErrorKind::HeadTooLarge).into());
        }
    }
}

/// Splits a complete head into CRLF-terminated lines, returning each line
/// with its starting byte offset. The trailing empty line is dropped.
fn head_lines(head: &[u8]) -> Result<Vec<(usize, &str)>, ProtocolError> {
    let text = std::str::from_utf8(head).map_err(|e| {
        ProtocolError::at(e.valid_up_to(), ProtocolErrorKind::NotUtf8)
    })?;
    let mut lines = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive("\r\n") {
        let Some(line) = raw.strip_suffix("\r\n") else {
            return Err(ProtocolError::at(offset, ProtocolErrorKind::Incomplete));
        };
        if let Some(bad) = line.find(['\r', '\n']) {
            return Err(ProtocolError::at(offset + bad, ProtocolErrorKind::MalformedHeader));
        }
        lines.push((offset, line));
        offset += raw.len();
    }
    match lines.pop() {
        Some((_, "")) if !lines.is_empty() => Ok(lines),
        _ => Err(ProtocolError::at(0, ProtocolErrorKind::BadStartLine)),
    }
}

fn parse_headers(lines: &[(usize, &str)]) -> Result<Headers, ProtocolError> {
    let mut headers = Headers::new();
    for &(offset, line) in lines {
        let Some((name, value)) = line.split_once(": ") else {
            return Err(ProtocolError::at(offset, ProtocolErrorKind::MalformedHeader));
        };
        if !valid_header_name(name) {
            return Err(ProtocolError::at(offset, ProtocolErrorKind::MalformedHeader));
        }
        if !valid_header_value(value) {
            return Err(ProtocolError::at(offset + name.len() + 2, ProtocolErrorKind::MalformedHeader));
        }
        if name.eq_ignore_ascii_case("Authorization") && headers.get("Authorization").is_some() {
            return Err(ProtocolError::at(offset, ProtocolErrorKind::DuplicateAuthorization));
        }
        headers.push(name, value);
    }
    Ok(headers)
}

fn parse_request_head(head: &[u8]) -> Result<Request, ProtocolError> {
    let lines = head_lines(head)?;
    let (_, start) = lines[0];
    let mut parts = start.splitn(3, ' ');
    let (Some(method), Some(path), Some(version)) = (parts.next(), parts.next(), parts.next())
    else {
        return Err(ProtocolError::at(0, ProtocolErrorKind::BadStartLine));
    };
    let method =
        Method::parse(method).ok_or(ProtocolError::at(0, ProtocolErrorKind::UnknownMethod))?;
    let version_offset = start.len() - version.len();
    if version != VERSION {
        return Err(ProtocolError::at(version_offset, ProtocolErrorKind::BadVersion));
    }
    let path_offset = method.as_str().len() + 1;
    let path = match method {
        Method::Stats if path.is_empty() => None,
        Method::Stats => return Err(ProtocolError::at(path_offset, ProtocolErrorKind::BadPath)),
        _ => Some(
            ObjectPath::parse(path)
                .map_err(|_| ProtocolError::at(path_offset, ProtocolErrorKind::BadPath))?,
        ),
    };
    let headers = parse_headers(&lines[1..])?;
    Ok(Request {
        method,
        path,
        headers,
    })
}

fn parse_response_head(head: &[u8]) -> Result<Response, ProtocolError> {
    let lines = head_lines(head)?;
    let (_, start) = lines[0];
    let mut parts = start.splitn(3, ' ');
    let (Some(version), Some(code), Some(_reason)) = (parts.next(), parts.next(), parts.next())
    else {
        return Err(ProtocolError::at(0, ProtocolErrorKind::BadStartLine));
    };
    if version != VERSION {
        return Err(ProtocolError::at(0, ProtocolErrorKind::BadVersion));
    }
    let code = code
        .parse::<u16>()
        .ok()
        .and_then(StatusCode::from_code)
        .ok_or(ProtocolError::at(version.len() + 1, ProtocolErrorKind::BadStatus))?;
    let headers = parse_headers(&lines[1..])?;
    Ok(Response {
        code,
        headers,
        body: Vec::new(),
    })
}
