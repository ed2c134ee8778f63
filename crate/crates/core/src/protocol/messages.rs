use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::encoding::TensorEncoding;
use crate::error::{AscError, Result};
use crate::model::{BBox, Detection, ObjectTarget};
use crate::oracle::{Capabilities, Objective, ObjectiveKind};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Hello,
    Eval,
    Grad,
    Bye,
    Error,
}

/// One newline-delimited frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub op: Op,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new(id: u64, op: Op, payload: impl Serialize) -> Self {
        Self { id, op, payload: serde_json::to_value(payload).expect("payload serializes") }
    }

    pub fn error(id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Self::new(id, Op::Error, ErrorPayload { code: code as u32, message: message.into() })
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("message serializes");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| AscError::Protocol(format!("malformed frame: {e}")))
    }

    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| AscError::Protocol(format!("bad {:?} payload: {e}", self.op)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    BadRequest = 1,
    UnsupportedObjective = 2,
    Internal = 3,
    Shutdown = 4,
}

impl ErrorCode {
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Self::BadRequest),
            2 => Some(Self::UnsupportedObjective),
            3 => Some(Self::Internal),
            4 => Some(Self::Shutdown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub protocol_version: u32,
    #[serde(default)]
    pub capabilities: Option<Capabilities>,
}

/// The part of an objective a remote detector needs. Segmentation masks
/// stay on the engine side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObjective {
    pub kind: ObjectiveKind,
    pub bbox: BBox,
    pub category: u32,
}

impl From<&Objective> for WireObjective {
    fn from(o: &Objective) -> Self {
        Self { kind: o.kind, bbox: o.target.bbox, category: o.target.category }
    }
}

impl WireObjective {
    pub fn to_objective(&self) -> Objective {
        Objective::new(self.kind, ObjectTarget::new(self.bbox, self.category))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub image: TensorEncoding,
    pub objective: WireObjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub value: f64,
    #[serde(default)]
    pub grad: Option<TensorEncoding>,
    #[serde(default)]
    pub detections: Vec<Detection>,
}
