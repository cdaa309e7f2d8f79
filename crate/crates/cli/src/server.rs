//! Live session service: one engine per WebSocket connection, plus plain
//! HTTP serving of the UI assets from a directory.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use tungstenite::{Message, WebSocket};

use touchwalker::network::Model;
use touchwalker::runtime::{Engine, EngineConfig, Terrain, TouchFrame};

use crate::protocol::{fault, ClientMessage, ServerMessage, PROTOCOL_VERSION};

pub const DEFAULT_PORT: u16 = 8137;

pub struct ServeConfig {
    pub model: Arc<Model>,
    pub engine: EngineConfig,
    pub terrain: Option<Terrain>,
    pub ui_dir: Option<PathBuf>,
}

pub struct Server {
    listener: TcpListener,
    config: Arc<ServeConfig>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServeConfig) -> io::Result<Server> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            config: Arc::new(config),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever, each on its own thread.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            match stream {
                Ok(stream) => {
                    let config = self.config.clone();
                    thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = handle_connection(stream, &config) {
                            log::debug!("connection {peer:?} ended: {e:#}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        Ok(())
    }

    pub fn spawn(self) -> thread::JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

/// Peeks at the request head without consuming it.
fn peek_head(stream: &TcpStream) -> io::Result<String> {
    let mut buf = [0u8; 4096];
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let n = stream.peek(&mut buf)?;
        let head = &buf[..n];
        if n == 0 || n == buf.len() || head.windows(4).any(|w| w == b"\r\n\r\n") || Instant::now() > deadline {
            return Ok(String::from_utf8_lossy(head).into_owned());
        }
        thread::sleep(Duration::from_millis(1));
    }
}

fn handle_connection(stream: TcpStream, config: &ServeConfig) -> anyhow::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let head = peek_head(&stream)?;
    if head.to_ascii_lowercase().contains("upgrade: websocket") {
        stream.set_read_timeout(None)?;
        let ws = tungstenite::accept(stream).context("websocket handshake")?;
        Session::new(ws, config).run()
    } else {
        serve_static(stream, config)
    }
}

struct Session<'a> {
    ws: WebSocket<TcpStream>,
    config: &'a ServeConfig,
    engine: Option<Engine>,
    last_seq: u64,
}

impl<'a> Session<'a> {
    fn new(ws: WebSocket<TcpStream>, config: &'a ServeConfig) -> Self {
        Session {
            ws,
            config,
            engine: None,
            last_seq: 0,
        }
    }

    fn send(&mut self, msg: &ServerMessage) -> anyhow::Result<()> {
        self.ws.send(Message::text(serde_json::to_string(msg)?))?;
        Ok(())
    }

    /// Sends a fault and closes the connection.
    fn close_with(&mut self, code: &str, message: String) -> anyhow::Result<()> {
        self.send(&ServerMessage::fault(code, message))?;
        let _ = self.ws.close(None);
        self.ws.get_ref().set_read_timeout(Some(Duration::from_secs(1)))?;
        while self.ws.read().is_ok() {}
        Ok(())
    }

    fn run(mut self) -> anyhow::Result<()> {
        let tick = Duration::from_secs_f64(1.0 / self.config.engine.frame_rate);
        let mut idle = 2 * tick;
        loop {
            let timeout = self.engine.is_some().then_some(idle);
            self.ws.get_ref().set_read_timeout(timeout)?;
            match self.ws.read() {
                Ok(Message::Text(text)) => {
                    idle = 2 * tick;
                    let msg = match serde_json::from_str::<ClientMessage>(&text) {
                        Ok(m) => m,
                        Err(e) => return self.close_with(fault::BAD_MESSAGE, format!("unreadable message: {e}")),
                    };
                    if !self.handle(msg)? {
                        return Ok(());
                    }
                }
                Ok(Message::Binary(_)) => {
                    return self.close_with(fault::BAD_MESSAGE, "binary frames are not supported".into());
                }
                Ok(Message::Close(_)) => {}
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                {
                    self.self_tick()?;
                    idle = tick;
                }
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Handles one message; `false` ends the session.
    fn handle(&mut self, msg: ClientMessage) -> anyhow::Result<bool> {
        match msg {
            ClientMessage::Hello {
                protocol_version,
                region_scale,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    self.close_with(
                        fault::UNSUPPORTED_VERSION,
                        format!("protocol version {protocol_version} is not supported (server speaks {PROTOCOL_VERSION})"),
                    )?;
                    return Ok(false);
                }
                let mut engine_config = self.config.engine;
                if let Some(s) = region_scale.filter(|s| *s > 0.0 && s.is_finite()) {
                    engine_config.region_scale = s;
                }
                let model = self.config.model.clone();
                let engine = Engine::new(model.clone(), engine_config, self.config.terrain.clone())?;
                self.engine = Some(engine);
                self.send(&ServerMessage::HelloAck {
                    protocol_version: PROTOCOL_VERSION,
                    k: model.config.k,
                    joints: model.skeleton.joint_count(),
                    joint_names: model.skeleton.names().to_vec(),
                    parents: model.skeleton.parents().to_vec(),
                    frame_rate: engine_config.frame_rate,
                })?;
            }
            ClientMessage::TouchFrame { seq, touches, joystick } => {
                if self.engine.is_none() {
                    self.close_with(fault::HANDSHAKE_REQUIRED, "send hello before touch frames".into())?;
                    return Ok(false);
                }
                if seq <= self.last_seq {
                    self.close_with(
                        fault::BAD_SEQUENCE,
                        format!("seq {seq} does not increase past {}", self.last_seq),
                    )?;
                    return Ok(false);
                }
                self.last_seq = seq;
                self.step(seq, &TouchFrame { touches, joystick })?;
            }
            ClientMessage::Reset => match self.engine.as_mut() {
                Some(e) => e.reset(),
                None => {
                    self.close_with(fault::HANDSHAKE_REQUIRED, "send hello before reset".into())?;
                    return Ok(false);
                }
            },
        }
        Ok(true)
    }

    fn step(&mut self, seq: u64, frame: &TouchFrame) -> anyhow::Result<()> {
        let engine = self.engine.as_mut().expect("step after handshake");
        let msg = match engine.step(frame) {
            Ok(pose) => ServerMessage::pose(seq, &pose, engine.state().touch_assignment()),
            Err(e) => {
                engine.reset();
                ServerMessage::fault(fault::ENGINE_FAULT, format!("{e}; session reset"))
            }
        };
        self.send(&msg)
    }

    fn self_tick(&mut self) -> anyhow::Result<()> {
        self.step(0, &TouchFrame::empty())
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto a file below `root`, refusing anything that
/// would leave it.
pub fn resolve_asset(root: &Path, request_path: &str) -> Option<PathBuf> {
    let path = request_path.split(['?', '#']).next().unwrap_or("");
    let mut out = root.to_path_buf();
    for part in Path::new(path.trim_start_matches('/')).components() {
        match part {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    out.is_file().then_some(out)
}

fn respond(stream: &mut TcpStream, status: &str, content_type: &str, body: &[u8]) -> io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

fn serve_static(mut stream: TcpStream, config: &ServeConfig) -> anyhow::Result<()> {
    let mut head = Vec::new();
    let mut byte = [0u8; 1];
    while !head.ends_with(b"\r\n\r\n") && head.len() < 16 * 1024 {
        if stream.read(&mut byte)? == 0 {
            break;
        }
        head.push(byte[0]);
    }
    let head = String::from_utf8_lossy(&head);
    let mut parts = head.lines().next().unwrap_or("").split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    if method != "GET" && method != "HEAD" {
        return Ok(respond(&mut stream, "405 Method Not Allowed", "text/plain", b"method not allowed\n")?);
    }
    let file = config.ui_dir.as_deref().and_then(|root| resolve_asset(root, path));
    match file {
        Some(file) => {
            let body = std::fs::read(&file)?;
            let body = if method == "HEAD" { &[][..] } else { &body[..] };
            respond(&mut stream, "200 OK", content_type(&file), body)?;
        }
        None => respond(&mut stream, "404 Not Found", "text/plain", b"not found\n")?,
    }
    Ok(())
}
