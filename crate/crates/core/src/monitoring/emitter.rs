use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::model::{Component, Event, MonitorRecord, ObjectPath};
use crate::wire::encode_monitor_record;

enum Sink {
    Disabled,
    Udp { socket: UdpSocket, target: SocketAddr },
    Memory(Mutex<Vec<MonitorRecord>>),
}

/// Fire-and-forget sender of monitoring records.
///
/// Send failures are counted and otherwise ignored: the data path never
/// waits on telemetry.
pub struct MonitorEmitter {
    sink: Sink,
    emitted: Arc<AtomicU64>,
    failed: AtomicU64,
}

impl MonitorEmitter {
    pub fn disabled() -> Self {
        Self::with_sink(Sink::Disabled)
    }

    pub fn memory() -> Self {
        Self::with_sink(Sink::Memory(Mutex::new(Vec::new())))
    }

    pub fn udp(target: SocketAddr) -> std::io::Result<Self> {
        let bind: SocketAddr = if target.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        Ok(Self::with_sink(Sink::Udp { socket, target }))
    }

    fn with_sink(sink: Sink) -> Self {
        Self {
            sink,
            emitted: Arc::new(AtomicU64::new(0)),
            failed: AtomicU64::new(0),
        }
    }

    /// Shares the emission tally with other emitters (the harness sums all
    /// services into one counter).
    pub fn with_tally(mut self, tally: Arc<AtomicU64>) -> Self {
        self.emitted = tally;
        self
    }

    pub fn emit(&self, record: &MonitorRecord) {
        match &self.sink {
            Sink::Disabled => return,
            Sink::Memory(records) => records.lock().unwrap().push(record.clone()),
            Sink::Udp { socket, target } => {
                let sent = encode_monitor_record(record)
                    .ok()
                    .and_then(|bytes| socket.send_to(&bytes, target).ok());
                if sent.is_none() {
                    self.failed.fetch_add(1, Ordering::Relaxed);
                    return;
                }
            }
        }
        self.emitted.fetch_add(1, Ordering::SeqCst);
    }

    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::SeqCst)
    }

    pub fn failed(&self) -> u64 {
        self.failed.load(Ordering::Relaxed)
    }

    /// Records captured by a memory sink (empty for other sinks).
    pub fn captured(&self) -> Vec<MonitorRecord> {
        match &self.sink {
            Sink::Memory(records) => records.lock().unwrap().clone(),
            _ => Vec::new(),
        }
    }
}

/// Allocates transfer identifiers unique across restarts of one host.
pub struct XferIds {
    prefix: String,
    next: AtomicU64,
}

impl XferIds {
    pub fn new(host: &str) -> Self {
        Self {
            prefix: format!("{host}-{:08x}", rand::random::<u32>()),
            next: AtomicU64::new(1),
        }
    }

    pub fn next(&self) -> String {
        format!("{}-{}", self.prefix, self.next.fetch_add(1, Ordering::Relaxed))
    }
}

/// An open f-stream transfer; emits the close record when finished.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub xfer_id: String,
    pub host: String,
    pub component: Component,
    pub path: ObjectPath,
    pub client: String,
    pub opened_ms: u64,
}

impl Transfer {
    pub fn open(
        emitter: &MonitorEmitter,
        xfer_id: String,
        host: &str,
        component: Component,
        path: &ObjectPath,
        client: &str,
        now_ms: u64,
    ) -> Self {
        let transfer = Self {
            xfer_id,
            host: host.to_owned(),
            component,
            path: path.clone(),
            client: client.to_owned(),
            opened_ms: now_ms,
        };
        emitter.emit(&transfer.record(Event::Open, 0, now_ms));
        transfer
    }

    pub fn record(&self, event: Event, bytes: u64, now_ms: u64) -> MonitorRecord {
        MonitorRecord::new(
            event,
            now_ms,
            &self.host,
            self.component,
            &self.path,
            bytes,
            &self.client,
            &self.xfer_id,
        )
    }

    pub fn close(self, emitter: &MonitorEmitter, bytes: u64, now_ms: u64) {
        let duration = now_ms.saturating_sub(self.opened_ms);
        emitter.emit(&self.record(Event::Close, bytes, now_ms).with_duration(duration));
    }
}
