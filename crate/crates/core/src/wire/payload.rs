//! Payload encodings.
//!
//! Tensors (INTERMEDIATE and PREDICTION): `u32` element count, then each
//! element as `f32` LE or one `i8` code. ERROR: `u8` reason code, then a
//! UTF-8 message. HELLO: the split manifest as JSON.

use super::frame::{Dtype, Frame, FrameError, MsgType, FRAME_OVERHEAD};
use crate::compression::FixedPointFormat;
use crate::split::{DType, Intermediate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    ManifestMismatch = 1,
    Malformed = 2,
    Protocol = 3,
    Shape = 4,
    Internal = 5,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::ManifestMismatch,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::Protocol,
            4 => ErrorCode::Shape,
            5 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

impl From<DType> for Dtype {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => Dtype::F32,
            DType::Q8 => Dtype::Q8,
        }
    }
}

pub fn serialize_intermediate(z: &Intermediate) -> Result<Vec<u8>, FrameError> {
    if z.is_empty() {
        return Err(FrameError::BadPayload("empty tensor".into()));
    }
    let n = u32::try_from(z.len()).map_err(|_| FrameError::PayloadTooLarge(z.len()))?;
    let mut out = n.to_le_bytes().to_vec();
    match z {
        Intermediate::F32(v) => {
            out.reserve(4 * v.len());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Intermediate::Q8 { codes, .. } => out.extend(codes.iter().map(|&c| c as u8)),
    }
    Ok(out)
}

/// Payload size for `elements` values of `dtype`.
pub fn payload_size(elements: usize, dtype: DType) -> usize {
    4 + elements
        * match dtype {
            DType::F32 => 4,
            DType::Q8 => 1,
        }
}

/// Bytes one window's INTERMEDIATE frame occupies on the wire.
pub fn wire_bytes_per_window(elements: usize, dtype: DType) -> usize {
    FRAME_OVERHEAD + payload_size(elements, dtype)
}

pub fn deserialize_intermediate(dtype: Dtype, reserved: u8, payload: &[u8]) -> Result<Intermediate, FrameError> {
    if payload.len() < 4 {
        return Err(FrameError::BadPayload("tensor payload shorter than its count".into()));
    }
    let n = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    if n == 0 {
        return Err(FrameError::BadPayload("empty tensor".into()));
    }
    let body = &payload[4..];
    match dtype {
        Dtype::F32 => {
            if reserved != 0 {
                return Err(FrameError::BadPayload("float32 frame with a format descriptor".into()));
            }
            if body.len() != 4 * n {
                return Err(FrameError::BadPayload(format!("{n} float32 values need {} bytes, got {}", 4 * n, body.len())));
            }
            Ok(Intermediate::F32(
                body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ))
        }
        Dtype::Q8 => {
            let format = FixedPointFormat::from_nibbles(reserved)
                .map_err(|_| FrameError::BadPayload(format!("invalid Q-format descriptor {reserved:#04x}")))?;
            if body.len() != n {
                return Err(FrameError::BadPayload(format!("{n} q8 codes need {n} bytes, got {}", body.len())));
            }
            Ok(Intermediate::Q8 {
                codes: body.iter().map(|&b| b as i8).collect(),
                format,
            })
        }
    }
}

pub fn tensor_frame(msg_type: MsgType, z: &Intermediate) -> Result<Frame, FrameError> {
    let reserved = match z {
        Intermediate::F32(_) => 0,
        Intermediate::Q8 { format, .. } => format.nibbles(),
    };
    Ok(Frame::new(msg_type, z.dtype().into(), reserved, serialize_intermediate(z)?))
}

pub fn frame_tensor(frame: &Frame) -> Result<Intermediate, FrameError> {
    deserialize_intermediate(frame.dtype, frame.reserved, &frame.payload)
}

pub fn error_frame(code: ErrorCode, message: &str) -> Frame {
    let mut payload = vec![code as u8];
    payload.extend_from_slice(message.as_bytes());
    Frame::new(MsgType::Error, Dtype::F32, 0, payload)
}

/// `(reason code, message)` from an ERROR payload.
pub fn parse_error(payload: &[u8]) -> Result<(u8, String), FrameError> {
    let (&code, msg) = payload
        .split_first()
        .ok_or_else(|| FrameError::BadPayload("ERROR frame without a reason code".into()))?;
    Ok((code, String::from_utf8_lossy(msg).into_owned()))
}
