//! Blocking TCP plumbing shared by every service: a one-request-per-connection
//! accept loop and a client-side request/response exchange.

use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::wire::{Request, Response, WireError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
const WRITE_CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn resolve(addr: &str) -> Result<SocketAddr, NetError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| NetError::Resolve(addr.to_owned()))
}

pub fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, NetError> {
    let sock = resolve(addr)?;
    let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|source| NetError::Connect {
        addr: addr.to_owned(),
        source,
    })?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

/// Sends one request on a fresh connection and reads the response.
pub fn exchange(addr: &str, request: &Request, timeout: Duration) -> Result<Response, NetError> {
    let stream = connect(addr, timeout)?;
    let head = request
        .encode()
        .map_err(|e| NetError::Wire(WireError::Protocol(e)))?;
    (&stream).write_all(&head)?;
    let mut reader = BufReader::new(&stream);
    Ok(Response::read_from(&mut reader)?)
}

/// Result of handling one request. `on_sent` runs after the response has
/// been written (or the write failed) with the number of body bytes that
/// reached the socket.
pub struct Reply {
    pub response: Response,
    pub on_sent: Option<Box<dyn FnOnce(u64) + Send>>,
}

impl From<Response> for Reply {
    fn from(response: Response) -> Self {
        Self {
            response,
            on_sent: None,
        }
    }
}

/// A service speaking the request/response protocol.
pub trait Service: Send + Sync + 'static {
    fn handle(&self, request: Request, client: &str) -> Reply;

    /// Gauge of open connections maintained by the accept loop.
    fn active_connections(&self) -> &AtomicU64;
}

/// Handle to a running accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    open: Arc<AtomicU64>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, then waits (bounded) for in-flight connections.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let deadline = Instant::now() + Duration::from_secs(2);
        while self.open.load(Ordering::SeqCst) > 0 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(2));
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Gauge(Arc<AtomicU64>);

impl Drop for Gauge {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Runs a generic accept loop; `on_conn` gets every accepted stream on its
/// own thread.
pub fn accept_loop<F>(listener: TcpListener, name: &str, on_conn: F) -> io::Result<ServerHandle>
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let open = Arc::new(AtomicU64::new(0));
    let on_conn = Arc::new(on_conn);
    let thread = {
        let stop = stop.clone();
        let open = open.clone();
        thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    open.fetch_add(1, Ordering::SeqCst);
                    let gauge = Gauge(open.clone());
                    let on_conn = on_conn.clone();
                    let spawned = thread::Builder::new().spawn(move || {
                        let _gauge = gauge;
                        on_conn(stream);
                    });
                    if spawned.is_err() {
                        continue;
                    }
                }
            })?
    };
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
        open,
    })
}

/// Serves one request per connection with `service`.
pub fn serve<S: Service>(listener: TcpListener, name: &str, service: Arc<S>) -> io::Result<ServerHandle> {
    accept_loop(listener, name, move |stream| {
        let active = service.active_connections();
        active.fetch_add(1, Ordering::SeqCst);
        handle_connection(&*service, stream);
        active.fetch_sub(1, Ordering::SeqCst);
    })
}

fn handle_connection<S: Service>(service: &S, stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(DEFAULT_TIMEOUT));
    let _ = stream.set_write_timeout(Some(DEFAULT_TIMEOUT));
    let _ = stream.set_nodelay(true);
    let client = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "unknown".into());
    let request = {
        let mut reader = BufReader::new(&stream);
        match Request::read_from(&mut reader) {
            Ok(r) => r,
            Err(_) => {
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
    };
    let Reply { response, on_sent } = service.handle(request, &client);
    let sent = write_response(&stream, &response).unwrap_or_else(|partial| partial);
    if let Some(done) = on_sent {
        done(sent);
    }
    let _ = stream.shutdown(Shutdown::Write);
}

/// Writes head and body; returns body bytes written, or the partial count
/// on failure.
fn write_response(stream: &TcpStream, response: &Response) -> Result<u64, u64> {
    let head = response.encode_head().map_err(|_| 0u64)?;
    let mut writer = stream;
    writer.write_all(&head).map_err(|_| 0u64)?;
    let mut sent = 0u64;
    for chunk in response.body.chunks(WRITE_CHUNK) {
        writer.write_all(chunk).map_err(|_| sent)?;
        sent += chunk.len() as u64;
    }
    Ok(sent)
}
