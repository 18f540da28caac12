//! Shoveler: UDP ingest into a bounded drop-oldest queue, drained over a
//! framed TCP link. A record leaves the queue only once the collector has
//! acknowledged its frame.

use std::collections::VecDeque;
use std::io::{self, Read};
use std::net::{TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::net::{self, Reply, ServerHandle, Service};
use crate::wire::{decode_monitor_record, encode_monitor_record, frame_write, Method, Request, Response, StatusCode, ACK, MAX_DATAGRAM};

pub const DEFAULT_QUEUE_BOUND: usize = 10_000;

/// Invariant: `received == forwarded + dropped + queue_depth`. Malformed
/// datagrams are counted separately and never enter the queue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShovelerCounters {
    pub received: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub queue_depth: u64,
    pub malformed: u64,
    pub capacity: u64,
}

impl ShovelerCounters {
    pub fn conserved(&self) -> bool {
        self.received == self.forwarded + self.dropped + self.queue_depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Enqueued,
    /// Enqueued after dropping the oldest queued record.
    EnqueuedDroppingOldest,
    Malformed,
}

struct QueueState {
    items: VecDeque<(u64, Vec<u8>)>,
    next_seq: u64,
    counters: ShovelerCounters,
}

pub struct ShovelerQueue {
    bound: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl ShovelerQueue {
    pub fn new(bound: usize) -> Self {
        assert!(bound > 0, "queue bound must be positive");
        Self {
            bound,
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(bound.min(1 << 16)),
                next_seq: 0,
                counters: ShovelerCounters {
                    capacity: bound as u64,
                    ..Default::default()
                },
            }),
            ready: Condvar::new(),
        }
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    /// Validates a datagram and enqueues its canonical encoding.
    pub fn ingest(&self, datagram: &[u8]) -> IngestOutcome {
        let payload = match decode_monitor_record(datagram).and_then(|r| encode_monitor_record(&r)) {
            Ok(p) => p,
            Err(_) => {
                self.state.lock().unwrap().counters.malformed += 1;
                return IngestOutcome::Malformed;
            }
        };
        let mut state = self.state.lock().unwrap();
        let mut outcome = IngestOutcome::Enqueued;
        if state.items.len() >= self.bound {
            state.items.pop_front();
            state.counters.dropped += 1;
            outcome = IngestOutcome::EnqueuedDroppingOldest;
        }
        let seq = state.next_seq;
        state.next_seq += 1;
        state.items.push_back((seq, payload));
        state.counters.received += 1;
        state.counters.queue_depth = state.items.len() as u64;
        drop(state);
        self.ready.notify_one();
        outcome
    }

    /// Oldest queued record, waiting up to `wait` for one to arrive.
    pub fn peek(&self, wait: Duration) -> Option<(u64, Vec<u8>)> {
        let state = self.state.lock().unwrap();
        let (state, _) = self
            .ready
            .wait_timeout_while(state, wait, |s| s.items.is_empty())
            .unwrap();
        state.items.front().cloned()
    }

    /// Removes record `seq` after its acknowledgement. Returns false when it
    /// was already displaced by overflow.
    pub fn ack(&self, seq: u64) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.items.front().map(|(s, _)| *s) != Some(seq) {
            return false;
        }
        state.items.pop_front();
        state.counters.forwarded += 1;
        state.counters.queue_depth = state.items.len() as u64;
        true
    }

    pub fn counters(&self) -> ShovelerCounters {
        self.state.lock().unwrap().counters
    }
}

/// Exponential reconnect delay.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    cap: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, cap: Duration) -> Self {
        Self {
            initial,
            cap,
            next: initial,
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        let delay = self.next;
        self.next = (self.next * 2).min(self.cap);
        delay
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new(Duration::from_millis(500), Duration::from_secs(30))
    }
}

/// Sends queued records over `stream` one frame at a time until the queue
/// stays empty for `idle`, `stop` is raised, or the link fails. Returns the
/// number of acknowledged frames.
pub fn drain_connection(
    queue: &ShovelerQueue,
    stream: &mut TcpStream,
    idle: Duration,
    stop: &AtomicBool,
) -> io::Result<u64> {
    let mut acked = 0;
    while !stop.load(Ordering::SeqCst) {
        let Some((seq, payload)) = queue.peek(idle) else {
            return Ok(acked);
        };
        frame_write(stream, &payload).map_err(io::Error::other)?;
        let mut ack = [0u8; 1];
        stream.read_exact(&mut ack)?;
        if ack[0] != ACK {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "unexpected ack byte"));
        }
        queue.ack(seq);
        acked += 1;
    }
    Ok(acked)
}

#[derive(Debug, Clone)]
pub struct ShovelerConfig {
    pub collector: String,
    pub queue_bound: usize,
    pub backoff: Backoff,
    pub ack_timeout: Duration,
}

impl ShovelerConfig {
    pub fn new(collector: impl Into<String>) -> Self {
        Self {
            collector: collector.into(),
            queue_bound: DEFAULT_QUEUE_BOUND,
            backoff: Backoff::default(),
            ack_timeout: Duration::from_secs(5),
        }
    }
}

struct Admin {
    queue: Arc<ShovelerQueue>,
    active: AtomicU64,
}

impl Service for Admin {
    fn handle(&self, request: Request, _client: &str) -> Reply {
        match request.method {
            Method::Stats => Response::ok(serde_json::to_vec(&self.queue.counters()).expect("serializes")).into(),
            _ => Response::empty(StatusCode::NotFound).into(),
        }
    }

    fn active_connections(&self) -> &AtomicU64 {
        &self.active
    }
}

pub struct Shoveler {
    queue: Arc<ShovelerQueue>,
    stop: Arc<AtomicBool>,
    paused: Arc<AtomicBool>,
    udp_addr: std::net::SocketAddr,
    threads: Vec<JoinHandle<()>>,
    admin: ServerHandle,
}

fn sleep_unless(stop: &AtomicBool, total: Duration) {
    let deadline = Instant::now() + total;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(20)));
    }
}

impl Shoveler {
    pub fn start(udp: UdpSocket, admin: TcpListener, config: ShovelerConfig) -> io::Result<Self> {
        let queue = Arc::new(ShovelerQueue::new(config.queue_bound));
        let stop = Arc::new(AtomicBool::new(false));
        let paused = Arc::new(AtomicBool::new(false));
        let _ = socket2::SockRef::from(&udp).set_recv_buffer_size(8 << 20);
        udp.set_read_timeout(Some(Duration::from_millis(50)))?;
        let udp_addr = udp.local_addr()?;

        let ingest = {
            let queue = queue.clone();
            let stop = stop.clone();
            thread::Builder::new().name("shoveler-udp".into()).spawn(move || {
                let mut buf = vec![0u8; MAX_DATAGRAM + 1];
                while !stop.load(Ordering::SeqCst) {
                    match udp.recv_from(&mut buf) {
                        Ok((n, _)) => {
                            queue.ingest(&buf[..n]);
                        }
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                        Err(_) => thread::sleep(Duration::from_millis(10)),
                    }
                }
            })?
        };

        let drain = {
            let queue = queue.clone();
            let stop = stop.clone();
            let paused = paused.clone();
            let mut backoff = config.backoff.clone();
            let collector = config.collector.clone();
            let ack_timeout = config.ack_timeout;
            thread::Builder::new().name("shoveler-drain".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    if paused.load(Ordering::SeqCst) {
                        thread::sleep(Duration::from_millis(10));
                        continue;
                    }
                    let mut stream = match net::connect(&collector, Duration::from_secs(1)) {
                        Ok(s) => s,
                        Err(_) => {
                            sleep_unless(&stop, backoff.next_delay());
                            continue;
                        }
                    };
                    let _ = stream.set_read_timeout(Some(ack_timeout));
                    backoff.reset();
                    loop {
                        if stop.load(Ordering::SeqCst) || paused.load(Ordering::SeqCst) {
                            break;
                        }
                        match drain_connection(&queue, &mut stream, Duration::from_millis(50), &paused) {
                            Ok(_) => continue,
                            Err(_) => {
                                sleep_unless(&stop, backoff.next_delay());
                                break;
                            }
                        }
                    }
                }
            })?
        };

        let admin = net::serve(
            admin,
            "shoveler-admin",
            Arc::new(Admin {
                queue: queue.clone(),
                active: AtomicU64::new(0),
            }),
        )?;
        Ok(Self {
            queue,
            stop,
            paused,
            udp_addr,
            threads: vec![ingest, drain],
            admin,
        })
    }

    pub fn queue(&self) -> &Arc<ShovelerQueue> {
        &self.queue
    }

    pub fn counters(&self) -> ShovelerCounters {
        self.queue.counters()
    }

    pub fn udp_addr(&self) -> std::net::SocketAddr {
        self.udp_addr
    }

    pub fn admin_addr(&self) -> std::net::SocketAddr {
        self.admin.addr()
    }

    /// Holds records in the queue without forwarding them.
    pub fn set_paused(&self, paused: bool) {
        self.paused.store(paused, Ordering::SeqCst);
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.paused.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.admin.shutdown();
    }
}

impl Drop for Shoveler {
    fn drop(&mut self) {
        self.shutdown();
    }
}
