//! Session gateway: a WebSocket endpoint where each connection runs its own
//! realtime pipeline fed by typed words, plus plain HTTP for the console's
//! static files. Both share one port; the request head decides which.

mod frame;
mod live;
mod session;

use std::fs;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use cascade_core::PipelineConfig;
use thiserror::Error;

pub use frame::{push_event, ClientEvent, Frame};
pub use live::{default_reply, ClientWord, LiveScript};
pub use session::{BARGE_IN_MS, LEAD_MS, PAUSE_RANGE_MS};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown event kind '{0}'")]
    UnknownEventKind(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("client went away")]
    ClientGone,
    #[error("session failed: {0}")]
    Session(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::BindFailure { .. } => "bind_failure",
            GatewayError::MalformedFrame(_) => "malformed_frame",
            GatewayError::UnknownEventKind(_) => "unknown_event_kind",
            GatewayError::InvalidParam(_) => "invalid_param",
            GatewayError::ClientGone => "client_gone",
            GatewayError::Session(_) => "session",
            GatewayError::Io(_) => "io",
        }
    }
}

const INDEX: &str = "<!doctype html><title>cascade</title><p>Console assets are not installed. \
Start the server with <code>--static-dir</code> or connect a WebSocket client to this address.</p>";

pub struct Gateway {
    listener: TcpListener,
    cfg: Arc<PipelineConfig>,
    static_dir: Option<PathBuf>,
}

impl Gateway {
    pub fn bind(addr: SocketAddr, cfg: PipelineConfig, static_dir: Option<PathBuf>) -> Result<Self, GatewayError> {
        let listener = TcpListener::bind(addr).map_err(|source| GatewayError::BindFailure { addr, source })?;
        Ok(Self { listener, cfg: Arc::new(cfg), static_dir })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Accepts connections forever, one thread each.
    pub fn serve(self) {
        let static_dir = Arc::new(self.static_dir);
        for conn in self.listener.incoming() {
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let cfg = self.cfg.clone();
            let dir = static_dir.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle(stream, &cfg, dir.as_deref()) {
                    log::info!("connection {peer:?} ended: {e}");
                }
            });
        }
    }

    /// Serves on a background thread and returns the bound address.
    pub fn spawn(self) -> (SocketAddr, JoinHandle<()>) {
        let addr = self.local_addr();
        (addr, thread::spawn(move || self.serve()))
    }
}

fn handle(stream: TcpStream, cfg: &PipelineConfig, static_dir: Option<&Path>) -> Result<(), GatewayError> {
    let head = peek_head(&stream)?;
    if head.to_ascii_lowercase().contains("upgrade: websocket") {
        let ws = tungstenite::accept(stream).map_err(|e| GatewayError::MalformedFrame(e.to_string()))?;
        log::info!("session started");
        let r = session::run(ws, cfg);
        log::info!("session ended");
        r
    } else {
        serve_static(stream, &head, static_dir)
    }
}

/// The request line and headers, left unread in the socket.
fn peek_head(stream: &TcpStream) -> Result<String, GatewayError> {
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut buf = vec![0u8; 8192];
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    loop {
        let n = match stream.peek(&mut buf) {
            Ok(0) => return Err(GatewayError::ClientGone),
            Ok(n) => n,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => 0,
            Err(e) => return Err(e.into()),
        };
        let text = String::from_utf8_lossy(&buf[..n]);
        if let Some(end) = text.find("\r\n\r\n") {
            return Ok(text[..end].to_string());
        }
        if n == buf.len() || Instant::now() > deadline {
            return Err(GatewayError::MalformedFrame("request head too long or incomplete".into()));
        }
        thread::sleep(Duration::from_millis(2));
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

fn serve_static(mut stream: TcpStream, head: &str, static_dir: Option<&Path>) -> Result<(), GatewayError> {
    let mut drain = vec![0u8; head.len() + 4];
    stream.read_exact(&mut drain)?;
    let mut parts = head.lines().next().unwrap_or("").split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let (status, ctype, body) = if method != "GET" && method != "HEAD" {
        ("405 Method Not Allowed", "text/plain", b"method not allowed".to_vec())
    } else {
        match lookup(static_dir, path) {
            Some((ct, body)) => ("200 OK", ct, body),
            None => ("404 Not Found", "text/plain", b"not found".to_vec()),
        }
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    if method != "HEAD" {
        stream.write_all(&body)?;
    }
    stream.flush()?;
    Ok(())
}

fn lookup(static_dir: Option<&Path>, path: &str) -> Option<(&'static str, Vec<u8>)> {
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let rel = if rel.as_os_str().is_empty() { Path::new("index.html") } else { rel };
    match static_dir {
        Some(dir) => {
            let full = dir.join(rel);
            fs::read(&full).ok().map(|b| (content_type(&full), b))
        }
        None => (rel == Path::new("index.html")).then(|| ("text/html; charset=utf-8", INDEX.as_bytes().to_vec())),
    }
}
