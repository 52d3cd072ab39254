//! Frame layout (little-endian):
//!
//! ```text
//! "SL" | version u8 | msg_type u8 | dtype u8 | reserved u8 | payload_len u32 | payload | crc32 u32
//! ```
//!
//! The CRC covers everything before it.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"SL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 4;
/// Upper bound on accepted payloads; far above any model's intermediate.
pub const MAX_PAYLOAD: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Intermediate = 2,
    Prediction = 3,
    Error = 4,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::Intermediate,
            3 => MsgType::Prediction,
            4 => MsgType::Error,
            other => return Err(FrameError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    Q8 = 1,
}

impl TryFrom<u8> for Dtype {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::Q8),
            other => Err(FrameError::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("unknown dtype {0}")]
    UnknownDtype(u8),
    #[error("frame CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("frame length {actual} does not match header ({expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("malformed payload: {0}")]
    BadPayload(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub dtype: Dtype,
    /// Q-format nibbles for q8 (integer bits high, fractional bits low), else 0.
    pub reserved: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, dtype: Dtype, reserved: u8, payload: Vec<u8>) -> Self {
        Frame {
            msg_type,
            dtype,
            reserved,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }
}

fn header(frame: &Frame) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..2].copy_from_slice(&MAGIC);
    h[2] = VERSION;
    h[3] = frame.msg_type as u8;
    h[4] = frame.dtype as u8;
    h[5] = frame.reserved;
    h[6..10].copy_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    h
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&header(frame));
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Length, magic and payload size come first so that the CRC is only
/// computed over a frame whose extent is known; field values are checked
/// only once the bytes are known to be intact.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(FrameError::Truncated {
            needed: FRAME_OVERHEAD,
            have: bytes.len(),
        });
    }
    if bytes[..2] != MAGIC {
        return Err(FrameError::BadMagic([bytes[0], bytes[1]]));
    }
    let payload_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload_len));
    }
    let expected = FRAME_OVERHEAD + payload_len;
    if bytes.len() < expected {
        return Err(FrameError::Truncated {
            needed: expected,
            have: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FrameError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FrameError::BadCrc { stored, computed });
    }
    if bytes[2] != VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[2]));
    }
    Ok(Frame {
        msg_type: MsgType::try_from(bytes[3])?,
        dtype: Dtype::try_from(bytes[4])?,
        reserved: bytes[5],
        payload: body[HEADER_LEN..].to_vec(),
    })
}

#[derive(Debug, Error)]
pub enum ReadFrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Reads exactly one frame from a stream. Returns `Ok(None)` on a clean EOF
/// before the first byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ReadFrameError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(FrameError::Truncated {
                    needed: HEADER_LEN,
                    have: got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if head[..2] != MAGIC {
        return Err(FrameError::BadMagic([head[0], head[1]]).into());
    }
    let payload_len = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload_len).into());
    }
    let mut buf = Vec::with_capacity(FRAME_OVERHEAD + payload_len);
    buf.extend_from_slice(&head);
    buf.resize(FRAME_OVERHEAD + payload_len, 0);
    r.read_exact(&mut buf[HEADER_LEN..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ReadFrameError::Frame(FrameError::Truncated {
                needed: FRAME_OVERHEAD + payload_len,
                have: HEADER_LEN,
            })
        } else {
            e.into()
        }
    })?;
    Ok(Some(decode_frame(&buf)?))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let bytes = encode_frame(frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)?;
    w.flush()
}
