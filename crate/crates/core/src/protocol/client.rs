//! Client side: a remote detector behind the [`Oracle`] trait.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use super::encoding::{decode_field, encode_image};
use super::messages::{
    ErrorPayload, HelloPayload, Message, Op, QueryPayload, ReportPayload, WireObjective, PROTOCOL_VERSION,
};
use crate::error::{AscError, Result};
use crate::model::ImagePlane;
use crate::oracle::{Capabilities, Objective, Oracle, OracleReport};

pub const TIMEOUT_ENV: &str = "ASC_ORACLE_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Response timeout: `ASC_ORACLE_TIMEOUT_MS` when set and valid, else 30 s.
pub fn timeout_from_env() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_TIMEOUT)
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    closed: Option<String>,
}

impl Connection {
    fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Self { writer: Box::new(writer), lines: rx, next_id: 1, closed: None }
    }

    fn send_line(&mut self, line: &str) -> Result<()> {
        if let Some(why) = &self.closed {
            return Err(AscError::Transport(format!("connection closed: {why}")));
        }
        let r = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush());
        r.map_err(|e| self.close(AscError::Transport(format!("write failed: {e}"))))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Message::parse(&line).map_err(|e| self.close(e)),
            Ok(Err(e)) => Err(self.close(AscError::Transport(format!("read failed: {e}")))),
            Err(RecvTimeoutError::Timeout) => Err(self.close(AscError::Timeout(timeout.as_millis() as u64))),
            Err(RecvTimeoutError::Disconnected) => Err(self.close(AscError::Transport("peer closed the connection".into()))),
        }
    }

    /// Marks the connection unusable; a late reply would otherwise desync ids.
    fn close(&mut self, err: AscError) -> AscError {
        self.closed.get_or_insert_with(|| err.to_string());
        err
    }

    /// One request, one response, with id correlation.
    fn exchange(&mut self, op: Op, payload: impl serde::Serialize, timeout: Duration) -> Result<Message> {
        let id = self.next_id;
        self.next_id += 1;
        self.send_line(&Message::new(id, op, payload).to_line())?;
        let reply = self.recv(timeout)?;
        if reply.id != id {
            return Err(self.close(AscError::Protocol(format!("response id {} does not match request id {id}", reply.id))));
        }
        if reply.op == Op::Error {
            let e: ErrorPayload = reply.payload_as()?;
            return Err(AscError::Remote { code: e.code, message: e.message });
        }
        if reply.op != op {
            return Err(self.close(AscError::Protocol(format!("expected {op:?} response, got {:?}", reply.op))));
        }
        Ok(reply)
    }
}

/// Remote oracle over one connection. Requests are serialized by a lock, so
/// the handle may be shared across threads; open more connections for
/// actual parallelism.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    capabilities: Capabilities,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

impl RemoteOracle {
    /// Wraps an existing byte stream pair and performs the handshake.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let mut conn = Connection::new(reader, writer);
        let hello = conn.exchange(Op::Hello, HelloPayload { protocol_version: PROTOCOL_VERSION, capabilities: None }, timeout)?;
        let h: HelloPayload = hello.payload_as()?;
        if h.protocol_version != PROTOCOL_VERSION {
            return Err(AscError::Protocol(format!("server speaks protocol {}, client {PROTOCOL_VERSION}", h.protocol_version)));
        }
        let capabilities = h.capabilities.ok_or_else(|| AscError::Protocol("hello reply lacks capabilities".into()))?;
        Ok(Self { conn: Mutex::new(conn), capabilities, timeout, child: None })
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| AscError::Transport(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone().map_err(|e| AscError::Transport(e.to_string()))?;
        Self::from_streams(reader, stream, timeout)
    }

    /// Spawns `program args...` and talks to it over its stdin/stdout.
    pub fn spawn_stdio(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AscError::Transport(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::from_streams(stdout, stdin, timeout) {
            Ok(mut o) => {
                o.child = Some(Mutex::new(child));
                Ok(o)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn query(&self, op: Op, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        let payload = QueryPayload { image: encode_image(image), objective: WireObjective::from(objective) };
        let reply = self.lock().exchange(op, payload, self.timeout)?;
        let r: ReportPayload = reply.payload_as()?;
        let grad = match r.grad {
            Some(enc) => {
                let g = decode_field(&enc)?;
                if g.dims() != image.dims() {
                    return Err(AscError::Protocol(format!("gradient dims {:?} do not match image {:?}", g.dims(), image.dims())));
                }
                Some(g)
            }
            None if op == Op::Grad => return Err(AscError::Protocol("grad response without gradient".into())),
            None => None,
        };
        if !r.value.is_finite() {
            return Err(AscError::Protocol("non-finite objective value".into()));
        }
        Ok(OracleReport { value: r.value, grad, detections: r.detections })
    }

    /// Sends a raw line and returns whatever frame comes back, without id
    /// checks. Intended for conformance probes.
    pub fn raw_exchange(&self, line: &str) -> Result<Message> {
        let mut conn = self.lock();
        conn.send_line(line)?;
        conn.recv(self.timeout)
    }

    /// Says goodbye; further requests fail with a transport error.
    pub fn close(&self) -> Result<()> {
        let mut conn = self.lock();
        if conn.closed.is_some() {
            return Ok(());
        }
        let r = conn.exchange(Op::Bye, serde_json::Value::Null, self.timeout).map(|_| ());
        conn.closed = Some("bye".into());
        r
    }
}

impl Drop for RemoteOracle {
    fn drop(&mut self) {
        let _ = self.close();
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap_or_else(|p| p.into_inner());
            if let Ok(None) = child.try_wait() {
                std::thread::sleep(Duration::from_millis(20));
                if let Ok(None) = child.try_wait() {
                    let _ = child.kill();
                }
            }
            let _ = child.wait();
        }
    }
}

impl Oracle for RemoteOracle {
    fn capabilities(&self) -> Capabilities {
        self.capabilities.clone()
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.query(Op::Eval, image, objective)
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.query(Op::Grad, image, objective)
    }
}
