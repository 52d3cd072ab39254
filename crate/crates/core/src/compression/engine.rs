//! Integer-only inference.
//!
//! Signals are int8 codes in the model's [`FixedPointFormat`] (scale `2^F`).
//! Every matrix-vector product accumulates `W·x` in `i32` at scale `2^2F`
//! with the bias pre-shifted by `F`, then rescales once (shift by `F`, round
//! half to even, saturate to int8). Sigmoid and tanh come from 1024-entry
//! tables over `[-8, 8]`.

use super::fixed::{dequantize, div_round_even, quantize_value, saturate_i8, shift_round_even, FixedPointFormat};
use super::quantize::QuantizedParameters;
use crate::error::{shape_err, Error, Result};
use crate::nn::params::GATES;
use crate::nn::{Activation, DenseWeights, LayerParams, LayerSpec, LstmWeights, ModelSpec, Signal};

pub const TABLE_SIZE: usize = 1024;
pub const TABLE_DOMAIN: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFunction {
    Sigmoid,
    Tanh,
}

impl TableFunction {
    fn eval(self, x: f64) -> f64 {
        match self {
            TableFunction::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            TableFunction::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    pub function: TableFunction,
    pub format: FixedPointFormat,
    /// Entry `i` holds `f(-8 + 16·i / 1023)` quantized to `format`.
    pub entries: Vec<i8>,
}

impl ActivationTable {
    pub fn new(function: TableFunction, format: FixedPointFormat) -> Self {
        let last = (TABLE_SIZE - 1) as f64;
        let entries = (0..TABLE_SIZE)
            .map(|i| {
                let x = -TABLE_DOMAIN + 2.0 * TABLE_DOMAIN * i as f64 / last;
                quantize_value(function.eval(x), format)
            })
            .collect();
        ActivationTable {
            function,
            format,
            entries,
        }
    }

    /// Table index for an input code: the nearest sample point, clamped.
    pub fn index(&self, code: i8) -> usize {
        let scale = 1i64 << self.format.fractional_bits();
        let offset = i64::from(code) + (TABLE_DOMAIN as i64) * scale;
        let den = 2 * (TABLE_DOMAIN as i64) * scale;
        div_round_even(offset * (TABLE_SIZE as i64 - 1), den).clamp(0, TABLE_SIZE as i64 - 1) as usize
    }

    pub fn lookup(&self, code: i8) -> i8 {
        self.entries[self.index(code)]
    }
}

/// Lookup tables for one format; build once and reuse across windows.
#[derive(Debug, Clone)]
pub struct QuantEngine {
    pub format: FixedPointFormat,
    sigmoid: ActivationTable,
    tanh: ActivationTable,
}

impl QuantEngine {
    pub fn new(format: FixedPointFormat) -> Self {
        QuantEngine {
            format,
            sigmoid: ActivationTable::new(TableFunction::Sigmoid, format),
            tanh: ActivationTable::new(TableFunction::Tanh, format),
        }
    }

    fn frac(&self) -> u32 {
        u32::from(self.format.fractional_bits())
    }

    /// Product of two codes rescaled back to the format.
    fn mul(&self, a: i8, b: i8) -> i32 {
        i32::from(a) * i32::from(b)
    }

    fn rescale(&self, acc: i32) -> i8 {
        saturate_i8(shift_round_even(i64::from(acc), self.frac()))
    }

    fn affine(&self, b: i8, rows: &[i8], x: &[i8]) -> i32 {
        let mut acc = i32::from(b) << self.frac();
        for (w, v) in rows.iter().zip(x) {
            acc += i32::from(*w) * i32::from(*v);
        }
        acc
    }

    fn lstm_step(&self, w: &LstmWeights<i8>, x: &[i8], h_prev: &[i8], c_prev: &[i8], c: &mut [i8], h: &mut [i8]) {
        let hs = w.hidden_size;
        let n_in = w.input_size;
        let mut pre = [0i8; GATES];
        for j in 0..hs {
            for (g, p) in pre.iter_mut().enumerate() {
                let r = g * hs + j;
                let acc = self.affine(w.b[r], &w.w[r * n_in..(r + 1) * n_in], x)
                    + self.affine(0, &w.u[r * hs..(r + 1) * hs], h_prev);
                *p = self.rescale(acc);
            }
            let i = self.sigmoid.lookup(pre[0]);
            let f = self.sigmoid.lookup(pre[1]);
            let g = self.tanh.lookup(pre[2]);
            let o = self.sigmoid.lookup(pre[3]);
            c[j] = self.rescale(self.mul(f, c_prev[j]) + self.mul(i, g));
            h[j] = self.rescale(self.mul(o, self.tanh.lookup(c[j])));
        }
    }

    fn lstm_layer(&self, w: &LstmWeights<i8>, seq: &[i8], steps: usize, return_sequences: bool) -> Vec<i8> {
        let hs = w.hidden_size;
        let n_in = w.input_size;
        let mut h_prev = vec![0i8; hs];
        let mut c_prev = vec![0i8; hs];
        let mut h = vec![0i8; hs];
        let mut c = vec![0i8; hs];
        let mut out = Vec::with_capacity(if return_sequences { steps * hs } else { hs });
        for t in 0..steps {
            self.lstm_step(w, &seq[t * n_in..(t + 1) * n_in], &h_prev, &c_prev, &mut c, &mut h);
            if return_sequences {
                out.extend_from_slice(&h);
            }
            std::mem::swap(&mut h, &mut h_prev);
            std::mem::swap(&mut c, &mut c_prev);
        }
        if !return_sequences {
            out.extend_from_slice(&h_prev);
        }
        out
    }

    fn dense(&self, d: &DenseWeights<i8>, act: Activation, x: &[i8]) -> Vec<i8> {
        let n_in = d.input_size;
        let mut out = Vec::with_capacity(x.len() / n_in * d.output_size);
        for xs in x.chunks_exact(n_in) {
            for r in 0..d.output_size {
                let y = self.rescale(self.affine(d.b[r], &d.w[r * n_in..(r + 1) * n_in], xs));
                out.push(match act {
                    Activation::Linear => y,
                    Activation::Relu => y.max(0),
                });
            }
        }
        out
    }

    fn layer(&self, layer: &LayerSpec, p: &LayerParams<i8>, input: &Signal<i8>) -> Result<Signal<i8>> {
        let out_shape = layer.output_shape(input.shape())?;
        let data = match (layer, p, input) {
            (LayerSpec::Lstm { return_sequences, .. }, LayerParams::Lstm(w), Signal::Sequence { steps, data, .. }) => {
                self.lstm_layer(w, data, *steps, *return_sequences)
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(d), x) => self.dense(d, *activation, x.as_slice()),
            _ => return shape_err(format!("parameters do not match layer {layer:?}")),
        };
        Signal::from_flat(out_shape, data)
    }

    /// Integer counterpart of [`crate::nn::run_layers`].
    pub fn run_layers(&self, layers: &[LayerSpec], params: &[LayerParams<i8>], input: Signal<i8>) -> Result<Vec<Signal<i8>>> {
        if layers.len() != params.len() {
            return shape_err(format!("{} layers but {} parameter blocks", layers.len(), params.len()));
        }
        let mut taps: Vec<Signal<i8>> = Vec::with_capacity(layers.len());
        for (k, (layer, p)) in layers.iter().zip(params).enumerate() {
            let x = taps.last().unwrap_or(&input);
            let y = self.layer(layer, p, x).map_err(|e| Error::Shape(format!("layer {k}: {e}")))?;
            taps.push(y);
        }
        Ok(taps)
    }

    pub fn quantize_window(&self, window: &[f64]) -> Vec<i8> {
        window.iter().map(|&x| quantize_value(x, self.format)).collect()
    }

    /// Full-model integer forward pass; returns the output code and taps.
    pub fn forward(&self, spec: &ModelSpec, q: &QuantizedParameters, window: &[f64]) -> Result<(i8, Vec<Signal<i8>>)> {
        if q.format != self.format {
            return Err(Error::InvalidArgument(format!(
                "engine built for Q{} but parameters are Q{}",
                self.format, q.format
            )));
        }
        q.check_against(spec)?;
        let input = Signal::from_flat(spec.input_shape(), self.quantize_window(window))?;
        let taps = self.run_layers(&spec.layers, &q.codes.layers, input)?;
        match taps.last().map(Signal::as_slice) {
            Some([code]) => Ok((*code, taps)),
            _ => shape_err("model does not end in a scalar"),
        }
    }

    pub fn predict(&self, spec: &ModelSpec, q: &QuantizedParameters, window: &[f64]) -> Result<f64> {
        Ok(dequantize(self.forward(spec, q, window)?.0, self.format))
    }
}

/// One-shot quantized prediction (dequantized).
pub fn quantized_forward(spec: &ModelSpec, q: &QuantizedParameters, window: &[f64]) -> Result<f64> {
    QuantEngine::new(q.format).predict(spec, q, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::quantize_params;
    use crate::nn::{build_student, init_params, model_forward, Parameters};

    fn q35() -> FixedPointFormat {
        FixedPointFormat::default()
    }

    #[test]
    fn tables_are_monotone_and_bounded() {
        for f in [TableFunction::Sigmoid, TableFunction::Tanh] {
            let t = ActivationTable::new(f, q35());
            assert_eq!(t.entries.len(), TABLE_SIZE);
            assert!(t.entries.windows(2).all(|w| w[0] <= w[1]));
            let (lo, hi) = match f {
                TableFunction::Sigmoid => (0, 32),
                TableFunction::Tanh => (-32, 32),
            };
            assert!(t.entries.iter().all(|&e| (lo..=hi).contains(&e)));
        }
    }

    #[test]
    fn table_index_covers_domain() {
        let t = ActivationTable::new(TableFunction::Sigmoid, q35());
        // Q3.5 inputs span [-4, 4): indices from the lower quarter to the upper.
        assert_eq!(t.index(0), 512); // 511.5 rounds to even
        assert_eq!(t.index(-128), 256); // (-4 + 8)/16 · 1023 = 255.75
        assert_eq!(t.lookup(0), 16); // sigmoid(0.0078) ≈ 0.5
        let wide = ActivationTable::new(TableFunction::Tanh, FixedPointFormat::new(7).unwrap());
        assert_eq!(wide.index(-128), 0);
        assert_eq!(wide.index(127), 1023);
    }

    #[test]
    fn single_dense_identity() {
        let spec = ModelSpec::new(vec![LayerSpec::dense(1, 1, Activation::Linear)], 1).unwrap();
        let p = Parameters {
            layers: vec![LayerParams::Dense(DenseWeights {
                input_size: 1,
                output_size: 1,
                w: vec![1.0f64],
                b: vec![0.0],
            })],
        };
        let q = quantize_params(&spec, &p, q35()).unwrap();
        let e = QuantEngine::new(q35());
        let (code, _) = e.forward(&spec, &q, &[0.5]).unwrap();
        assert_eq!(code, 16);
        assert_eq!(e.predict(&spec, &q, &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn zero_params_predict_zero() {
        let spec = build_student();
        let q = quantize_params(&spec, &Parameters::<f64>::zeros(&spec), q35()).unwrap();
        let (code, _) = QuantEngine::new(q35()).forward(&spec, &q, &[0.3; 15]).unwrap();
        assert_eq!(code, 0);
    }

    #[test]
    fn deterministic_and_close_to_float() {
        let spec = build_student();
        let p = init_params(&spec, 11);
        let q = quantize_params(&spec, &p, q35()).unwrap();
        let e = QuantEngine::new(q35());
        let w: Vec<f64> = (0..15).map(|i| 0.5 + 0.3 * (i as f64 * 0.4).sin()).collect();
        let a = e.forward(&spec, &q, &w).unwrap();
        let b = e.forward(&spec, &q, &w).unwrap();
        assert_eq!(a, b);
        let float = model_forward(&spec, &q.dequantized(), &w).unwrap().prediction;
        assert!((dequantize(a.0, q35()) - float).abs() < 0.25, "{} vs {float}", dequantize(a.0, q35()));
    }

    #[test]
    fn format_mismatch_rejected() {
        let spec = build_student();
        let q = quantize_params(&spec, &init_params(&spec, 0), q35()).unwrap();
        let e = QuantEngine::new(FixedPointFormat::new(4).unwrap());
        assert!(e.forward(&spec, &q, &[0.0; 15]).is_err());
    }
}
