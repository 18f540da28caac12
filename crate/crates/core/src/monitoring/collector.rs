//! Collector: validates forwarded records and appends them, deduplicated,
//! to a newline-delimited record log.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::net::{self, ServerHandle};
use crate::wire::{decode_monitor_record, encode_monitor_record, frame_read, ACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    Stored,
    Duplicate,
    Rejected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectorCounters {
    pub frames: u64,
    pub stored: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

struct RecordLog {
    file: File,
    seen: HashSet<String>,
}

pub struct Collector {
    path: PathBuf,
    log: Mutex<RecordLog>,
    frames: AtomicU64,
    stored: AtomicU64,
    duplicates: AtomicU64,
    rejected: AtomicU64,
}

impl Collector {
    /// Opens (or creates) the record log; records already in it are known
    /// for deduplication.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut seen = HashSet::new();
        if path.exists() {
            for line in fs::read_to_string(&path)?.lines() {
                if let Ok(record) = decode_monitor_record(line.as_bytes()) {
                    seen.insert(record.dedup_key());
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            log: Mutex::new(RecordLog { file, seen }),
            frames: AtomicU64::new(0),
            stored: AtomicU64::new(0),
            duplicates: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn handle_frame(&self, payload: &[u8]) -> FrameOutcome {
        self.frames.fetch_add(1, Ordering::SeqCst);
        let Ok(record) = decode_monitor_record(payload) else {
            self.rejected.fetch_add(1, Ordering::SeqCst);
            return FrameOutcome::Rejected;
        };
        let mut line = encode_monitor_record(&record).expect("decoded records re-encode");
        line.push(b'\n');
        let mut log = self.log.lock().unwrap();
        if !log.seen.insert(record.dedup_key()) {
            self.duplicates.fetch_add(1, Ordering::SeqCst);
            return FrameOutcome::Duplicate;
        }
        if log.file.write_all(&line).is_err() {
            log.seen.remove(&record.dedup_key());
            self.rejected.fetch_add(1, Ordering::SeqCst);
            return FrameOutcome::Rejected;
        }
        self.stored.fetch_add(1, Ordering::SeqCst);
        FrameOutcome::Stored
    }

    pub fn counters(&self) -> CollectorCounters {
        CollectorCounters {
            frames: self.frames.load(Ordering::SeqCst),
            stored: self.stored.load(Ordering::SeqCst),
            duplicates: self.duplicates.load(Ordering::SeqCst),
            rejected: self.rejected.load(Ordering::SeqCst),
        }
    }
}

#[derive(Default)]
struct Control {
    stop: AtomicBool,
    stalled: AtomicBool,
    crashed: AtomicBool,
    crash_after: Mutex<Option<u64>>,
    connections: Mutex<Vec<TcpStream>>,
}

impl Control {
    fn close_all(&self) {
        for conn in self.connections.lock().unwrap().drain(..) {
            let _ = conn.shutdown(Shutdown::Both);
        }
    }
}

/// Collector listening for framed records.
pub struct CollectorServer {
    collector: Arc<Collector>,
    control: Arc<Control>,
    server: ServerHandle,
}

impl CollectorServer {
    pub fn start(collector: Arc<Collector>, listener: TcpListener) -> io::Result<Self> {
        let control = Arc::new(Control::default());
        let server = {
            let collector = collector.clone();
            let control = control.clone();
            net::accept_loop(listener, "collector", move |stream| {
                serve_link(&collector, &control, stream);
            })?
        };
        Ok(Self {
            collector,
            control,
            server,
        })
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    /// Stops reading and acknowledging frames while set.
    pub fn set_stalled(&self, stalled: bool) {
        self.control.stalled.store(stalled, Ordering::SeqCst);
    }

    /// Simulates a crash right after the `n`-th stored record reaches the
    /// log: its acknowledgement is never sent and all links close.
    pub fn crash_after_stored(&self, n: u64) {
        *self.control.crash_after.lock().unwrap() = Some(n);
    }

    pub fn crashed(&self) -> bool {
        self.control.crashed.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        self.control.stop.store(true, Ordering::SeqCst);
        self.control.close_all();
        self.server.shutdown();
    }
}

impl Drop for CollectorServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_link(collector: &Collector, control: &Control, stream: TcpStream) {
    if control.stop.load(Ordering::SeqCst) || control.crashed.load(Ordering::SeqCst) {
        return;
    }
    if let Ok(clone) = stream.try_clone() {
        control.connections.lock().unwrap().push(clone);
    }
    let mut reader = &stream;
    let mut writer = &stream;
    loop {
        while control.stalled.load(Ordering::SeqCst) {
            if control.stop.load(Ordering::SeqCst) {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        if control.stop.load(Ordering::SeqCst) || control.crashed.load(Ordering::SeqCst) {
            return;
        }
        let payload = match frame_read(&mut reader) {
            Ok(Some(p)) => p,
            _ => break,
        };
        let outcome = collector.handle_frame(&payload);
        if outcome == FrameOutcome::Stored {
            let limit = *control.crash_after.lock().unwrap();
            if limit.is_some_and(|n| collector.counters().stored >= n) {
                control.crashed.store(true, Ordering::SeqCst);
                control.close_all();
                return;
            }
        }
        if writer.write_all(&[ACK]).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Component, Event, MonitorRecord, ObjectPath};

    fn close_record(xfer: &str) -> Vec<u8> {
        let r = MonitorRecord::new(
            Event::Close,
            1,
            "origin-1",
            Component::Origin,
            &ObjectPath::parse("/ligo/a").unwrap(),
            5,
            "c",
            xfer,
        )
        .with_duration(3);
        encode_monitor_record(&r).unwrap()
    }

    fn lines(path: &Path) -> usize {
        fs::read_to_string(path).unwrap().lines().count()
    }

    #[test]
    fn stores_deduplicates_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("records.log");
        let c = Collector::open(&log).unwrap();
        assert_eq!(c.handle_frame(&close_record("x1")), FrameOutcome::Stored);
        assert_eq!(lines(&log), 1);
        assert_eq!(c.handle_frame(&close_record("x1")), FrameOutcome::Duplicate);
        assert_eq!(lines(&log), 1);
        assert_eq!(c.handle_frame(b"{garbage"), FrameOutcome::Rejected);
        assert_eq!(lines(&log), 1);
        assert_eq!(
            c.counters(),
            CollectorCounters { frames: 3, stored: 1, duplicates: 1, rejected: 1 }
        );
    }

    #[test]
    fn dedup_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("records.log");
        Collector::open(&log).unwrap().handle_frame(&close_record("x1"));
        let c = Collector::open(&log).unwrap();
        assert_eq!(c.handle_frame(&close_record("x1")), FrameOutcome::Duplicate);
        assert_eq!(c.handle_frame(&close_record("x2")), FrameOutcome::Stored);
        assert_eq!(lines(&log), 2);
    }

    #[test]
    fn every_frame_is_acked_over_tcp() {
        let dir = tempfile::tempdir().unwrap();
        let c = Arc::new(Collector::open(dir.path().join("r.log")).unwrap());
        let server = CollectorServer::start(c.clone(), TcpListener::bind("127.0.0.1:0").unwrap()).unwrap();
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        for payload in [close_record("a"), close_record("a"), b"bad".to_vec()] {
            crate::wire::frame_write(&mut stream, &payload).unwrap();
            let mut ack = [0u8];
            io::Read::read_exact(&mut stream, &mut ack).unwrap();
            assert_eq!(ack[0], ACK);
        }
        assert_eq!(c.counters().stored, 1);
    }
}
