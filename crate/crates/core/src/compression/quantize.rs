//! Quantized parameters and their container.
//!
//! The container reuses the float model's header and layer descriptors with
//! kind byte 2 on every layer (flag bit 2 marks a dense layer), followed by
//! the format descriptor, the SHA-256 of the source float model file, and
//! the int8 arrays:
//!
//! ```text
//! "SLML" u16 version | u16 layers | u16 window
//! per layer:  u8 kind (= 2) | u8 flags | u32 input | u32 output
//! u8 integer_bits | u8 fractional_bits
//! [u8; 32] source model hash
//! per array:  u64 element count, then i8 codes
//! u32 CRC-32
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::fixed::{dequantize, quantize_value, FixedPointFormat};
use crate::error::{Error, Result};
use crate::nn::io::{
    encode_model, layer_flags, layer_from_descriptor, open_container, read_count, spec_from_layers, write_header,
    write_layer_descriptor, ByteWriter, ModelFileError, FLAG_DENSE, KIND_DENSE, KIND_LSTM, KIND_QUANTIZED,
};
use crate::nn::{ModelSpec, Parameters, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParameters {
    pub format: FixedPointFormat,
    pub codes: Parameters<i8>,
    /// SHA-256 of the float model file the codes were derived from.
    pub source_hash: [u8; 32],
}

impl QuantizedParameters {
    pub fn param_count(&self) -> usize {
        self.codes.arrays().map(|(_, a)| a.len()).sum()
    }

    pub fn dequantized(&self) -> Parameters<f64> {
        let fmt = self.format;
        self.codes.map(|q| dequantize(q, fmt))
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        self.codes.check_against(spec)
    }

    pub fn slice(&self, start: usize, end: usize) -> QuantizedParameters {
        QuantizedParameters {
            format: self.format,
            codes: self.codes.slice(start, end),
            source_hash: self.source_hash,
        }
    }

    pub fn source_hash_hex(&self) -> String {
        hex::encode(self.source_hash)
    }
}

/// Elementwise quantization. Zeros map to code 0, so a pruning pattern
/// survives.
pub fn quantize_params<T: Real>(spec: &ModelSpec, params: &Parameters<T>, format: FixedPointFormat) -> Result<QuantizedParameters> {
    params.check_against(spec)?;
    if params.values().any(|v| !Real::to_f64(v).is_finite()) {
        return Err(Error::InvalidArgument("cannot quantize non-finite parameters".into()));
    }
    let source_hash = Sha256::digest(encode_model(spec, params)?).into();
    Ok(QuantizedParameters {
        format,
        codes: params.map(|v| quantize_value(Real::to_f64(v), format)),
        source_hash,
    })
}

pub fn encode_quantized(spec: &ModelSpec, q: &QuantizedParameters) -> Result<Vec<u8>> {
    spec.validate()?;
    q.check_against(spec)?;
    let mut w = ByteWriter::new();
    write_header(&mut w, spec)?;
    for layer in &spec.layers {
        let mut flags = layer_flags(layer);
        if !layer.is_lstm() {
            flags |= FLAG_DENSE;
        }
        write_layer_descriptor(&mut w, KIND_QUANTIZED, flags, layer)?;
    }
    w.u8(q.format.integer_bits());
    w.u8(q.format.fractional_bits());
    w.bytes(&q.source_hash);
    for (_, arr) in q.codes.arrays() {
        w.u64(arr.len() as u64);
        w.bytes(&arr.iter().map(|&c| c as u8).collect::<Vec<u8>>());
    }
    Ok(w.finish())
}

pub fn decode_quantized(bytes: &[u8]) -> Result<(ModelSpec, QuantizedParameters), ModelFileError> {
    let (mut r, n_layers, window) = open_container(bytes)?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let flags = r.u8()?;
        let input = r.u32()?;
        let output = r.u32()?;
        match kind {
            KIND_QUANTIZED => {}
            KIND_LSTM | KIND_DENSE => {
                return Err(ModelFileError::Corrupt("file holds a float model, not a quantized one".into()))
            }
            k => return Err(ModelFileError::Corrupt(format!("unknown layer kind {k}"))),
        }
        layers.push(layer_from_descriptor(flags & FLAG_DENSE == 0, flags & !FLAG_DENSE, input, output)?);
    }
    let spec = spec_from_layers(layers, window)?;
    let int_bits = r.u8()?;
    let frac_bits = r.u8()?;
    if u16::from(int_bits) + u16::from(frac_bits) != 8 {
        return Err(ModelFileError::Corrupt(format!("format Q{int_bits}.{frac_bits} is not 8 bits")));
    }
    let format = FixedPointFormat::new(int_bits).map_err(|e| ModelFileError::Corrupt(e.to_string()))?;
    let source_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut codes = Parameters::<i8>::zeros(&spec);
    for (_, arr) in codes.arrays_mut() {
        let n = arr.len();
        read_count(&mut r, n)?;
        for (c, b) in arr.iter_mut().zip(r.take(n)?) {
            *c = *b as i8;
        }
    }
    if !r.is_done() {
        return Err(ModelFileError::Corrupt("trailing bytes after codes".into()));
    }
    Ok((
        spec,
        QuantizedParameters {
            format,
            codes,
            source_hash,
        },
    ))
}

pub fn save_quantized(path: impl AsRef<Path>, spec: &ModelSpec, q: &QuantizedParameters) -> Result<()> {
    std::fs::write(path, encode_quantized(spec, q)?)?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<(ModelSpec, QuantizedParameters)> {
    Ok(decode_quantized(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::prune_global_magnitude;
    use crate::nn::{build_student, build_teacher, init_params, TeacherDims};

    #[test]
    fn student_has_871_codes() {
        let spec = build_student();
        let q = quantize_params(&spec, &init_params(&spec, 0), FixedPointFormat::default()).unwrap();
        assert_eq!(q.param_count(), 871);
        let bytes = encode_quantized(&spec, &q).unwrap();
        // header 10, 4 descriptors, format 2, hash 32, 10 array counts, codes, crc
        assert_eq!(bytes.len(), 10 + 4 * 10 + 2 + 32 + 10 * 8 + 871 + 4);
    }

    #[test]
    fn round_trip() {
        let spec = build_teacher(TeacherDims::new(5, 4, 3));
        let q = quantize_params(&spec, &init_params(&spec, 1), FixedPointFormat::new(2).unwrap()).unwrap();
        let (s2, q2) = decode_quantized(&encode_quantized(&spec, &q).unwrap()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(q2, q);
    }

    #[test]
    fn zero_pattern_survives() {
        let spec = build_student();
        let (p, _) = prune_global_magnitude(&init_params(&spec, 3), 0.7).unwrap();
        let q = quantize_params(&spec, &p, FixedPointFormat::default()).unwrap();
        for ((_, a), (_, b)) in p.arrays().zip(q.codes.arrays()) {
            for (x, c) in a.iter().zip(b) {
                if *x == 0.0 {
                    assert_eq!(*c, 0);
                }
            }
        }
    }

    #[test]
    fn error_bound_for_in_range_params() {
        let spec = build_student();
        let p = init_params(&spec, 4);
        let fmt = FixedPointFormat::default();
        let q = quantize_params(&spec, &p, fmt).unwrap();
        for (a, b) in p.values().zip(q.dequantized().values()) {
            assert!((a - b).abs() <= 0.5 / fmt.scale());
        }
    }

    #[test]
    fn float_and_quantized_files_are_not_interchangeable() {
        let spec = build_student();
        let p = init_params(&spec, 0);
        let float_bytes = encode_model(&spec, &p).unwrap();
        assert!(decode_quantized(&float_bytes).is_err());
        let q = quantize_params(&spec, &p, FixedPointFormat::default()).unwrap();
        let qbytes = encode_quantized(&spec, &q).unwrap();
        assert!(crate::nn::io::decode_model(&qbytes).is_err());
        assert_eq!(q.source_hash.as_slice(), Sha256::digest(&float_bytes).as_slice());
    }

    #[test]
    fn corrupted_container_rejected() {
        let spec = build_student();
        let q = quantize_params(&spec, &init_params(&spec, 0), FixedPointFormat::default()).unwrap();
        let mut bytes = encode_quantized(&spec, &q).unwrap();
        bytes[60] ^= 0x10;
        assert!(matches!(decode_quantized(&bytes), Err(ModelFileError::Checksum { .. })));
    }
}
