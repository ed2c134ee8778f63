//! Newline-delimited JSON protocol for remote gradient oracles.
//!
//! A session starts with `hello` (version and capabilities), continues with
//! strictly alternating `eval`/`grad` requests and responses correlated by
//! id, and ends with `bye`. Failures come back as `error` frames with a
//! numeric code (see [`ErrorCode`]).

mod client;
mod encoding;
mod messages;
mod server;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use client::{timeout_from_env, RemoteOracle, DEFAULT_TIMEOUT, TIMEOUT_ENV};
pub use encoding::{decode_field, decode_image, encode_field, encode_image, TensorEncoding, DTYPE};
pub use messages::{
    ErrorCode, ErrorPayload, HelloPayload, Message, Op, QueryPayload, ReportPayload, WireObjective, PROTOCOL_VERSION,
};
pub use server::{serve_connection, serve_stdio, ServerOptions, TcpServer};

use crate::error::{AscError, Result};
use crate::model::{BBox, Field3, ImagePlane, ObjectTarget};
use crate::oracle::{Objective, ObjectiveKind, Oracle};

/// Where a remote oracle lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio { program: String, args: Vec<String> },
}

impl Endpoint {
    /// Parses `remote:HOST:PORT`, `tcp:HOST:PORT`, a bare `HOST:PORT`, or
    /// `stdio:PROGRAM ARGS...` (whitespace separated).
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || AscError::ContractViolation(format!("invalid endpoint {spec:?}"));
        if let Some(cmd) = spec.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(bad)?;
            return Ok(Endpoint::Stdio { program, args: parts.collect() });
        }
        let addr = spec.strip_prefix("remote:").or_else(|| spec.strip_prefix("tcp:")).unwrap_or(spec);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(addr.to_string())),
            _ => Err(bad()),
        }
    }

    pub fn connect(&self, timeout: Duration) -> Result<RemoteOracle> {
        match self {
            Endpoint::Tcp(addr) => RemoteOracle::connect_tcp(addr, timeout),
            Endpoint::Stdio { program, args } => RemoteOracle::spawn_stdio(program, args, timeout),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub protocol_version: u32,
    pub capabilities: crate::oracle::Capabilities,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn warnings(&self) -> usize {
        self.checks.iter().filter(|c| c.status == CheckStatus::Warn).count()
    }
}

/// Runs the conformance probes against a connected oracle. Transport
/// failures during the handshake surface as errors from `connect`; later
/// ones are recorded as failed checks.
pub fn conformance_check(remote: &RemoteOracle) -> ConformanceReport {
    let caps = remote.capabilities();
    let mut checks = Vec::new();
    let mut push = |name: &str, status: CheckStatus, detail: String| {
        checks.push(CheckResult { name: name.into(), status, detail });
    };
    push("handshake", CheckStatus::Pass, format!("protocol {PROTOCOL_VERSION}, capabilities {caps:?}"));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut exact = true;
    for _ in 0..100 {
        let values: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen::<f32>() as f64).collect();
        let img = ImagePlane::from_vec(8, 8, values).expect("values in [0, 1)");
        exact &= decode_image(&encode_image(&img)).ok().as_ref() == Some(&img);
    }
    push(
        "encoding_round_trip",
        if exact { CheckStatus::Pass } else { CheckStatus::Fail },
        "100 random 8x8x3 tensors".into(),
    );

    let image = probe_image();
    let target = ObjectTarget::new(BBox::new(4.0, 4.0, 8.0, 8.0), 0);
    for kind in ObjectiveKind::ALL {
        let objective = Objective::new(kind, target.clone());
        let name = format!("eval_{}", kind.name());
        if !caps.supports(kind) {
            match remote.evaluate(&image, &objective) {
                Err(AscError::Remote { code: 2, .. }) => {
                    push(&name, CheckStatus::Warn, "not advertised; server answered code 2".into())
                }
                other => push(&name, CheckStatus::Fail, format!("unadvertised objective should give code 2, got {other:?}")),
            }
            continue;
        }
        match remote.evaluate(&image, &objective) {
            Ok(r) if r.value.is_finite() => push(&name, CheckStatus::Pass, format!("value {}", r.value)),
            other => push(&name, CheckStatus::Fail, format!("{other:?}")),
        }
    }

    let kind = caps.objectives.first().copied().unwrap_or(ObjectiveKind::Vanishing);
    let objective = Objective::new(kind, target);
    if caps.grad {
        match remote.evaluate_with_gradient(&image, &objective) {
            Ok(r) => match r.grad {
                Some(g) if g.dims() == image.dims() && g.is_finite() => {
                    push("grad", CheckStatus::Pass, "finite gradient with image dims".into())
                }
                other => push("grad", CheckStatus::Fail, format!("bad gradient {:?}", other.map(|g| g.dims()))),
            },
            Err(e) => push("grad", CheckStatus::Fail, e.to_string()),
        }
    } else {
        match remote.evaluate_with_gradient(&image, &objective) {
            Err(AscError::Remote { code: 2, .. }) => {
                push("grad", CheckStatus::Warn, "server does not advertise grad; request answered with code 2".into())
            }
            other => push("grad", CheckStatus::Fail, format!("forward-only server should answer code 2, got {other:?}")),
        }
    }

    match remote.raw_exchange("{not json}\n") {
        Ok(m) if m.op == Op::Error && m.payload_as::<ErrorPayload>().map(|e| e.code).ok() == Some(1) => {
            push("probe_malformed_frame", CheckStatus::Pass, "code 1".into())
        }
        other => push("probe_malformed_frame", CheckStatus::Fail, format!("expected error code 1, got {other:?}")),
    }

    let mut bad = encode_image(&image);
    bad.dims = [bad.dims[0] + 1, bad.dims[1], bad.dims[2]];
    let frame = Message::new(
        999_999,
        Op::Eval,
        QueryPayload { image: bad, objective: WireObjective::from(&objective) },
    )
    .to_line();
    match remote.raw_exchange(&frame) {
        Ok(m) if m.op == Op::Error && m.id == 999_999 && m.payload_as::<ErrorPayload>().map(|e| e.code).ok() == Some(1) => {
            push("probe_bad_tensor", CheckStatus::Pass, "code 1 with echoed id".into())
        }
        other => push("probe_bad_tensor", CheckStatus::Fail, format!("expected error code 1, got {other:?}")),
    }

    match remote.close() {
        Ok(()) => push("bye", CheckStatus::Pass, String::new()),
        Err(e) => push("bye", CheckStatus::Fail, e.to_string()),
    }
    ConformanceReport { protocol_version: PROTOCOL_VERSION, capabilities: caps, checks }
}

/// A 16×16 dark square on a light background.
fn probe_image() -> ImagePlane {
    let mut f = Field3::filled(16, 16, 0.8);
    for r in 4..12 {
        for c in 4..12 {
            f.pixel_mut(r * 16 + c).fill(0.2);
        }
    }
    ImagePlane::new(f).expect("probe values are in range")
}
