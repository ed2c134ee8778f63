//! Tensors on the wire: f32 little-endian, row-major H×W×C, base64.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{Field3, ImagePlane, CHANNELS};

pub const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEncoding {
    pub dtype: String,
    /// `[H, W, C]`.
    pub dims: [usize; 3],
    pub data: String,
}

/// Encodes a field, rounding each value to the nearest f32.
pub fn encode_field(field: &Field3) -> TensorEncoding {
    let mut bytes = Vec::with_capacity(field.as_slice().len() * 4);
    for v in field.as_slice() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    TensorEncoding { dtype: DTYPE.into(), dims: [field.height(), field.width(), CHANNELS], data: STANDARD.encode(bytes) }
}

pub fn decode_field(enc: &TensorEncoding) -> Result<Field3> {
    if enc.dtype != DTYPE {
        return Err(AscError::Decode(format!("unsupported dtype {:?}", enc.dtype)));
    }
    let [h, w, c] = enc.dims;
    if c != CHANNELS {
        return Err(AscError::Decode(format!("expected {CHANNELS} channels, got {c}")));
    }
    let bytes = STANDARD.decode(&enc.data).map_err(|e| AscError::Decode(format!("bad base64: {e}")))?;
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c * 4))
        .ok_or_else(|| AscError::Decode(format!("dims {:?} overflow", enc.dims)))?;
    if bytes.len() != expected {
        return Err(AscError::Decode(format!("expected {expected} bytes for dims {:?}, got {}", enc.dims, bytes.len())));
    }
    let mut data = Vec::with_capacity(expected / 4);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(AscError::Decode(format!("non-finite value at element {i}")));
        }
        data.push(v as f64);
    }
    Field3::from_vec(h, w, data).map_err(|e| AscError::Decode(e.to_string()))
}

pub fn encode_image(image: &ImagePlane) -> TensorEncoding {
    encode_field(image.field())
}

pub fn decode_image(enc: &TensorEncoding) -> Result<ImagePlane> {
    ImagePlane::new(decode_field(enc)?).map_err(|e| AscError::Decode(e.to_string()))
}
