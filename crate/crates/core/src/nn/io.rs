//! Binary model container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SLML"            magic
//! u16               version (= 1)
//! u16               layer count
//! u16               window length
//! per layer:        u8 kind (0 = LSTM, 1 = Dense), u8 flags, u32 input, u32 output
//! per array:        u64 element count, then f32 elements (W, U for LSTM, then b)
//! u32               CRC-32 of all preceding bytes
//! ```
//!
//! Flags: bit 0 is `return_sequences` (LSTM) or `time_distributed` (Dense),
//! bit 1 selects relu. The quantized container (kind byte 2) is written by
//! [`crate::compression::quantize`] with the same header and helpers.

use std::path::Path;

use thiserror::Error;

use super::params::Parameters;
use super::{Activation, LayerSpec, ModelSpec, Real};
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"SLML";
pub const VERSION: u16 = 1;

pub(crate) const KIND_LSTM: u8 = 0;
pub(crate) const KIND_DENSE: u8 = 1;
pub(crate) const KIND_QUANTIZED: u8 = 2;

pub(crate) const FLAG_SEQUENCE: u8 = 1 << 0;
pub(crate) const FLAG_RELU: u8 = 1 << 1;
/// Quantized container only: the layer is dense (clear = LSTM).
pub(crate) const FLAG_DENSE: u8 = 1 << 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelFileError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u16),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed model file: {0}")]
    Corrupt(String),
}

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    /// Appends the CRC-32 trailer and returns the finished file.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self.pos.checked_add(n).ok_or(ModelFileError::Truncated)?;
        if end > self.buf.len() {
            return Err(ModelFileError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Validates magic, version and CRC; returns a reader over the body after
/// the version field, plus the layer count and window length.
pub(crate) fn open_container(bytes: &[u8]) -> Result<(ByteReader<'_>, u16, u16), ModelFileError> {
    if bytes.len() < 4 {
        return Err(ModelFileError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(ModelFileError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ModelFileError::UnsupportedVersion(version));
    }
    if bytes.len() < 14 {
        return Err(ModelFileError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelFileError::Checksum { stored, computed });
    }
    let mut r = ByteReader { buf: body, pos: 6 };
    let layers = r.u16()?;
    let window = r.u16()?;
    Ok((r, layers, window))
}

pub(crate) fn write_header(w: &mut ByteWriter, spec: &ModelSpec) -> Result<()> {
    let layers = u16::try_from(spec.layers.len())
        .map_err(|_| crate::error::Error::InvalidSpec("too many layers for the file format".into()))?;
    let window = u16::try_from(spec.window_length)
        .map_err(|_| crate::error::Error::InvalidSpec("window too long for the file format".into()))?;
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u16(layers);
    w.u16(window);
    Ok(())
}

pub(crate) fn layer_flags(layer: &LayerSpec) -> u8 {
    let mut flags = 0;
    match *layer {
        LayerSpec::Lstm {
            return_sequences, ..
        } => {
            if return_sequences {
                flags |= FLAG_SEQUENCE;
            }
        }
        LayerSpec::Dense {
            activation,
            time_distributed,
            ..
        } => {
            if time_distributed {
                flags |= FLAG_SEQUENCE;
            }
            if activation == Activation::Relu {
                flags |= FLAG_RELU;
            }
        }
    }
    flags
}

pub(crate) fn write_layer_descriptor(w: &mut ByteWriter, kind: u8, flags: u8, layer: &LayerSpec) -> Result<()> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| crate::error::Error::InvalidSpec("layer too wide for the file format".into()))
    };
    w.u8(kind);
    w.u8(flags);
    w.u32(dim(layer.input_size())?);
    w.u32(dim(layer.output_size())?);
    Ok(())
}

pub(crate) fn layer_from_descriptor(is_lstm: bool, flags: u8, input: u32, output: u32) -> Result<LayerSpec, ModelFileError> {
    let (input, output) = (input as usize, output as usize);
    if input == 0 || output == 0 {
        return Err(ModelFileError::Corrupt("zero layer dimension".into()));
    }
    let seq = flags & FLAG_SEQUENCE != 0;
    Ok(if is_lstm {
        if flags & FLAG_RELU != 0 {
            return Err(ModelFileError::Corrupt("relu flag on an LSTM layer".into()));
        }
        LayerSpec::lstm(input, output, seq)
    } else {
        let act = if flags & FLAG_RELU != 0 {
            Activation::Relu
        } else {
            Activation::Linear
        };
        LayerSpec::Dense {
            input_size: input,
            output_size: output,
            activation: act,
            time_distributed: seq,
        }
    })
}

pub(crate) fn spec_from_layers(layers: Vec<LayerSpec>, window: u16) -> Result<ModelSpec, ModelFileError> {
    ModelSpec::new(layers, window as usize).map_err(|e| ModelFileError::Corrupt(e.to_string()))
}

/// Reads a `u64` count and checks it against the expected array length.
pub(crate) fn read_count(r: &mut ByteReader<'_>, expected: usize) -> Result<(), ModelFileError> {
    let n = r.u64()?;
    if n != expected as u64 {
        return Err(ModelFileError::Corrupt(format!(
            "array has {n} elements, layer needs {expected}"
        )));
    }
    Ok(())
}

/// Serializes a model; parameters are stored as 32-bit reals.
pub fn encode_model<T: Real>(spec: &ModelSpec, params: &Parameters<T>) -> Result<Vec<u8>> {
    spec.validate()?;
    params.check_against(spec)?;
    let mut w = ByteWriter::new();
    write_header(&mut w, spec)?;
    for layer in &spec.layers {
        let kind = if layer.is_lstm() { KIND_LSTM } else { KIND_DENSE };
        write_layer_descriptor(&mut w, kind, layer_flags(layer), layer)?;
    }
    for (_, arr) in params.arrays() {
        w.u64(arr.len() as u64);
        for &v in arr {
            w.bytes(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelSpec, Parameters<f32>), ModelFileError> {
    let (mut r, n_layers, window) = open_container(bytes)?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let flags = r.u8()?;
        let input = r.u32()?;
        let output = r.u32()?;
        let is_lstm = match kind {
            KIND_LSTM => true,
            KIND_DENSE => false,
            KIND_QUANTIZED => {
                return Err(ModelFileError::Corrupt(
                    "file holds a quantized model; load it as one".into(),
                ))
            }
            k => return Err(ModelFileError::Corrupt(format!("unknown layer kind {k}"))),
        };
        layers.push(layer_from_descriptor(is_lstm, flags, input, output)?);
    }
    let spec = spec_from_layers(layers, window)?;
    let mut params = Parameters::<f32>::zeros(&spec);
    for (_, arr) in params.arrays_mut() {
        read_count(&mut r, arr.len())?;
        for v in arr.iter_mut() {
            *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        }
    }
    if !r.is_done() {
        return Err(ModelFileError::Corrupt("trailing bytes after weights".into()));
    }
    Ok((spec, params))
}

pub fn save_model<T: Real>(path: impl AsRef<Path>, spec: &ModelSpec, params: &Parameters<T>) -> Result<()> {
    std::fs::write(path, encode_model(spec, params)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, Parameters<f32>)> {
    let bytes = std::fs::read(path)?;
    Ok(decode_model(&bytes)?)
}
