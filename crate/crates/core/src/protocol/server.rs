//! Serves any [`Oracle`] over the wire protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::encoding::{decode_image, encode_field};
use super::messages::{ErrorCode, HelloPayload, Message, Op, QueryPayload, ReportPayload, PROTOCOL_VERSION};
use crate::error::{AscError, Result};
use crate::oracle::{Capabilities, Oracle};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerOptions {
    /// Advertise and serve evaluations only; gradient requests get code 2.
    pub forward_only: bool,
}

/// Handles one connection until `bye`, EOF, a version mismatch, or `stop`.
pub fn serve_connection<R: BufRead, W: Write>(
    oracle: &dyn Oracle,
    reader: R,
    mut writer: W,
    options: ServerOptions,
    stop: &AtomicBool,
) -> Result<()> {
    let mut caps = oracle.capabilities();
    if options.forward_only {
        caps = Capabilities { grad: false, ..caps };
    }
    let mut greeted = false;
    for line in reader.lines() {
        let line = line.map_err(|e| AscError::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, close) = if stop.load(Ordering::SeqCst) {
            let id = Message::parse(&line).map(|m| m.id).unwrap_or(0);
            (Message::error(id, ErrorCode::Shutdown, "server is shutting down"), true)
        } else {
            respond(oracle, &caps, &line, &mut greeted)
        };
        writer
            .write_all(reply.to_line().as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| AscError::Transport(e.to_string()))?;
        if close {
            break;
        }
    }
    Ok(())
}

fn respond(oracle: &dyn Oracle, caps: &Capabilities, line: &str, greeted: &mut bool) -> (Message, bool) {
    let msg = match Message::parse(line) {
        Ok(m) => m,
        Err(e) => return (Message::error(0, ErrorCode::BadRequest, e.to_string()), false),
    };
    let id = msg.id;
    match msg.op {
        Op::Hello => match msg.payload_as::<HelloPayload>() {
            Ok(h) if h.protocol_version == PROTOCOL_VERSION => {
                *greeted = true;
                let reply = HelloPayload { protocol_version: PROTOCOL_VERSION, capabilities: Some(caps.clone()) };
                (Message::new(id, Op::Hello, reply), false)
            }
            Ok(h) => (
                Message::error(id, ErrorCode::BadRequest, format!("protocol version {} unsupported, server speaks {PROTOCOL_VERSION}", h.protocol_version)),
                true,
            ),
            Err(e) => (Message::error(id, ErrorCode::BadRequest, e.to_string()), false),
        },
        Op::Bye => (Message::new(id, Op::Bye, serde_json::Value::Null), true),
        Op::Error => (Message::error(id, ErrorCode::BadRequest, "clients may not send error frames"), false),
        Op::Eval | Op::Grad if !*greeted => (Message::error(id, ErrorCode::BadRequest, "hello required first"), false),
        Op::Eval | Op::Grad => {
            let want_grad = msg.op == Op::Grad;
            (answer_query(oracle, caps, &msg, want_grad), false)
        }
    }
}

fn answer_query(oracle: &dyn Oracle, caps: &Capabilities, msg: &Message, want_grad: bool) -> Message {
    let id = msg.id;
    let query: QueryPayload = match msg.payload_as() {
        Ok(q) => q,
        Err(e) => return Message::error(id, ErrorCode::BadRequest, e.to_string()),
    };
    let image = match decode_image(&query.image) {
        Ok(i) => i,
        Err(e) => return Message::error(id, ErrorCode::BadRequest, e.to_string()),
    };
    if let Err(e) = caps.require(query.objective.kind, want_grad) {
        return Message::error(id, ErrorCode::UnsupportedObjective, e.to_string());
    }
    let objective = query.objective.to_objective();
    if let Err(e) = objective.target.validate(image.height(), image.width()) {
        return Message::error(id, ErrorCode::BadRequest, e.to_string());
    }
    let result = if want_grad { oracle.evaluate_with_gradient(&image, &objective) } else { oracle.evaluate(&image, &objective) };
    match result {
        Ok(report) => {
            let grad = if want_grad { report.grad.as_ref().map(encode_field) } else { None };
            if want_grad && grad.is_none() {
                return Message::error(id, ErrorCode::Internal, "oracle produced no gradient");
            }
            Message::new(id, msg.op, ReportPayload { value: report.value, grad, detections: report.detections })
        }
        Err(e @ (AscError::Capability(_) | AscError::ContractViolation(_))) => {
            Message::error(id, ErrorCode::UnsupportedObjective, e.to_string())
        }
        Err(e) => Message::error(id, ErrorCode::Internal, e.to_string()),
    }
}

/// Serves the oracle on stdin/stdout until `bye` or EOF.
pub fn serve_stdio(oracle: &dyn Oracle, options: ServerOptions) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_connection(oracle, stdin.lock(), stdout.lock(), options, &AtomicBool::new(false))
}

/// A background TCP server; every accepted connection gets its own thread.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind(oracle: Arc<dyn Oracle>, addr: &str, options: ServerOptions) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| AscError::Transport(format!("bind {addr}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| AscError::Transport(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let oracle = oracle.clone();
                let flag = flag.clone();
                std::thread::spawn(move || {
                    let _ = handle_tcp(oracle.as_ref(), stream, options, &flag);
                });
            }
        });
        Ok(Self { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends (after [`TcpServer::shutdown`] from
    /// another handle, or forever when serving from the CLI).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting; open connections answer further requests with code 4.
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.shutdown();
        }
    }
}

fn handle_tcp(oracle: &dyn Oracle, stream: TcpStream, options: ServerOptions, stop: &AtomicBool) -> Result<()> {
    let reader = BufReader::new(stream.try_clone().map_err(|e| AscError::Transport(e.to_string()))?);
    serve_connection(oracle, reader, stream, options, stop)
}
