//! Floating-point inference.
//!
//! Every path that evaluates layers (full model, edge half, server half,
//! training forward) goes through [`lstm_step`], [`dense_apply`] and
//! [`run_layers`], so split and unsplit evaluation perform the same
//! operations in the same order.

use super::params::{DenseWeights, LayerParams, LstmWeights, Parameters, GATES};
use super::{Activation, LayerSpec, ModelSpec, Real, Shape};
use crate::error::{shape_err, Error, Result};

/// A value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal<T> {
    /// Row-major `[steps × width]`.
    Sequence {
        steps: usize,
        width: usize,
        data: Vec<T>,
    },
    Vector(Vec<T>),
}

impl<T: Copy> Signal<T> {
    pub fn shape(&self) -> Shape {
        match self {
            Signal::Sequence { steps, width, .. } => Shape::Sequence {
                steps: *steps,
                width: *width,
            },
            Signal::Vector(v) => Shape::Vector(v.len()),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        match self {
            Signal::Sequence { data, .. } => data,
            Signal::Vector(v) => v,
        }
    }

    pub fn into_vec(self) -> Vec<T> {
        match self {
            Signal::Sequence { data, .. } => data,
            Signal::Vector(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.as_slice().is_empty()
    }

    /// Reinterprets flat data with the given shape.
    pub fn from_flat(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.element_count() {
            return shape_err(format!(
                "{} elements cannot form {shape:?}",
                data.len()
            ));
        }
        Ok(match shape {
            Shape::Sequence { steps, width } => Signal::Sequence { steps, width, data },
            Shape::Vector(_) => Signal::Vector(data),
        })
    }
}

/// Output of [`model_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub prediction: T,
    /// `taps[k]` is the output of layer `k`, i.e. the input of layer `k + 1`.
    pub taps: Vec<Signal<T>>,
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Dot product with eight fixed-order partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// One LSTM timestep.
///
/// `gates` receives the post-activation gate values `[i, f, g, o]` (length
/// `4h`); `c` and `h` receive the new cell and hidden state.
#[inline]
pub(crate) fn lstm_step<T: Real>(
    w: &LstmWeights<T>,
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    gates: &mut [T],
    c: &mut [T],
    h: &mut [T],
) {
    let n_in = w.input_size;
    let hs = w.hidden_size;
    for (r, g) in gates.iter_mut().enumerate().take(GATES * hs) {
        *g = w.b[r] + dot(&w.w[r * n_in..(r + 1) * n_in], x) + dot(&w.u[r * hs..(r + 1) * hs], h_prev);
    }
    let (i_g, rest) = gates.split_at_mut(hs);
    let (f_g, rest) = rest.split_at_mut(hs);
    let (g_g, o_g) = rest.split_at_mut(hs);
    for j in 0..hs {
        i_g[j] = sigmoid(i_g[j]);
        f_g[j] = sigmoid(f_g[j]);
        g_g[j] = g_g[j].tanh();
        o_g[j] = sigmoid(o_g[j]);
        c[j] = f_g[j] * c_prev[j] + i_g[j] * g_g[j];
        h[j] = o_g[j] * c[j].tanh();
    }
}

/// Standard LSTM cell update; returns `(h, c)`.
pub fn lstm_cell_step<T: Real>(
    w: &LstmWeights<T>,
    x_t: &[T],
    h_prev: &[T],
    c_prev: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let hs = w.hidden_size;
    if x_t.len() != w.input_size || h_prev.len() != hs || c_prev.len() != hs {
        return shape_err(format!(
            "cell expects x[{}], h[{hs}], c[{hs}]; got x[{}], h[{}], c[{}]",
            w.input_size,
            x_t.len(),
            h_prev.len(),
            c_prev.len()
        ));
    }
    if w.w.len() != GATES * hs * w.input_size || w.u.len() != GATES * hs * hs || w.b.len() != GATES * hs {
        return shape_err("LSTM weight arrays do not match their declared sizes");
    }
    let mut gates = vec![T::zero(); GATES * hs];
    let mut h = vec![T::zero(); hs];
    let mut c = vec![T::zero(); hs];
    lstm_step(w, x_t, h_prev, c_prev, &mut gates, &mut c, &mut h);
    Ok((h, c))
}

/// Runs an LSTM over `steps` rows of `seq`, state initialised to zero.
/// Returns the full hidden sequence or the last hidden state.
pub(crate) fn lstm_layer<T: Real>(
    w: &LstmWeights<T>,
    seq: &[T],
    steps: usize,
    return_sequences: bool,
) -> Vec<T> {
    let hs = w.hidden_size;
    let n_in = w.input_size;
    let mut gates = vec![T::zero(); GATES * hs];
    let mut h_prev = vec![T::zero(); hs];
    let mut c_prev = vec![T::zero(); hs];
    let mut h = vec![T::zero(); hs];
    let mut c = vec![T::zero(); hs];
    let mut out = Vec::with_capacity(if return_sequences { steps * hs } else { hs });
    for t in 0..steps {
        lstm_step(w, &seq[t * n_in..(t + 1) * n_in], &h_prev, &c_prev, &mut gates, &mut c, &mut h);
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

/// `act(W x + b)` into `out`.
#[inline]
pub(crate) fn dense_apply<T: Real>(d: &DenseWeights<T>, act: Activation, x: &[T], out: &mut [T]) {
    let n_in = d.input_size;
    for (r, o) in out.iter_mut().enumerate() {
        let z = d.b[r] + dot(&d.w[r * n_in..(r + 1) * n_in], x);
        *o = match act {
            Activation::Linear => z,
            Activation::Relu => z.max(T::zero()),
        };
    }
}

/// Evaluates one layer on a signal whose shape was already checked.
fn layer_forward<T: Real>(layer: &LayerSpec, params: &LayerParams<T>, input: &Signal<T>) -> Result<Signal<T>> {
    let out_shape = layer.output_shape(input.shape())?;
    let data = match (layer, params, input) {
        (
            LayerSpec::Lstm {
                return_sequences, ..
            },
            LayerParams::Lstm(w),
            Signal::Sequence { steps, data, .. },
        ) => lstm_layer(w, data, *steps, *return_sequences),
        (LayerSpec::Dense { activation, .. }, LayerParams::Dense(d), input) => {
            let x = input.as_slice();
            let steps = x.len() / d.input_size;
            let mut out = vec![T::zero(); steps * d.output_size];
            for (xs, os) in x.chunks_exact(d.input_size).zip(out.chunks_exact_mut(d.output_size)) {
                dense_apply(d, *activation, xs, os);
            }
            out
        }
        _ => return shape_err(format!("parameters do not match layer {layer:?}")),
    };
    Signal::from_flat(out_shape, data)
}

/// Evaluates `layers` in order on `input`, returning every layer's output.
pub fn run_layers<T: Real>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: Signal<T>,
) -> Result<Vec<Signal<T>>> {
    if layers.len() != params.len() {
        return shape_err(format!(
            "{} layers but {} parameter blocks",
            layers.len(),
            params.len()
        ));
    }
    let mut taps: Vec<Signal<T>> = Vec::with_capacity(layers.len());
    for (k, (layer, p)) in layers.iter().zip(params).enumerate() {
        let x = taps.last().unwrap_or(&input);
        let y = layer_forward(layer, p, x).map_err(|e| Error::Shape(format!("layer {k}: {e}")))?;
        taps.push(y);
    }
    Ok(taps)
}

/// Full forward pass of a forecasting model on one `[T × features]` window.
pub fn model_forward<T: Real>(spec: &ModelSpec, params: &Parameters<T>, window: &[T]) -> Result<Forward<T>> {
    params.check_against(spec)?;
    let input = Signal::from_flat(spec.input_shape(), window.to_vec())
        .map_err(|_| Error::Shape(format!(
            "window has {} values, expected {}×{}",
            window.len(),
            spec.window_length,
            spec.feature_count
        )))?;
    let taps = run_layers(&spec.layers, &params.layers, input)?;
    let last = taps.last().expect("spec has layers");
    let prediction = match last {
        Signal::Vector(v) if v.len() == 1 => v[0],
        other => {
            return shape_err(format!(
                "model output has shape {:?}, expected a scalar",
                other.shape()
            ))
        }
    };
    Ok(Forward { prediction, taps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_student, init_params, LayerSpec, ModelSpec};

    #[test]
    fn zero_cell_stays_zero() {
        let w = LstmWeights::<f64>::zeros(1, 1);
        let (h, c) = lstm_cell_step(&w, &[0.0], &[0.0], &[0.0]).unwrap();
        assert_eq!((h[0], c[0]), (0.0, 0.0));
    }

    #[test]
    fn zero_weights_with_unit_cell_state() {
        // f = σ(0) = 0.5, g = 0, so c = 0.5·1 and h = 0.5·tanh(0.5).
        let w = LstmWeights::<f64>::zeros(1, 1);
        let (h, c) = lstm_cell_step(&w, &[0.3], &[0.0], &[1.0]).unwrap();
        assert_eq!(c[0], 0.5);
        assert!((h[0] - 0.231_058_5).abs() < 1e-6);
    }

    #[test]
    fn cell_is_pure() {
        let spec = build_student();
        let p = init_params(&spec, 11);
        let LayerParams::Lstm(w) = &p.layers[1] else { unreachable!() };
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let h: Vec<f64> = (0..5).map(|i| i as f64 * -0.05).collect();
        let c = vec![0.2; 5];
        assert_eq!(lstm_cell_step(w, &x, &h, &c).unwrap(), lstm_cell_step(w, &x, &h, &c).unwrap());
    }

    #[test]
    fn cell_rejects_wrong_dims() {
        let w = LstmWeights::<f64>::zeros(2, 3);
        assert!(lstm_cell_step(&w, &[0.0], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_cell_step(&w, &[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_student_predicts_zero() {
        let spec = build_student();
        let p = Parameters::<f64>::zeros(&spec);
        let f = model_forward(&spec, &p, &[0.7; 15]).unwrap();
        assert_eq!(f.prediction, 0.0);
    }

    #[test]
    fn student_taps_have_expected_sizes() {
        let spec = build_student();
        let p = init_params(&spec, 5);
        let f = model_forward(&spec, &p, &[0.5; 15]).unwrap();
        assert_eq!(f.taps[0].len(), 150);
        assert_eq!(f.taps[1].len(), 5);
        assert_eq!(f.taps[2].len(), 10);
        assert_eq!(f.taps[3].len(), 1);
    }

    #[test]
    fn window_shape_is_checked() {
        let spec = build_student();
        let p = init_params(&spec, 5);
        assert!(model_forward(&spec, &p, &[0.5; 14]).is_err());
    }

    #[test]
    fn dot_matches_naive_sum_closely() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.3).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn taps_chain_into_next_layer() {
        let spec = ModelSpec::new(
            vec![
                LayerSpec::lstm(1, 3, true),
                LayerSpec::time_distributed(3, 2, Activation::Relu),
                LayerSpec::lstm(2, 2, false),
                LayerSpec::dense(2, 1, Activation::Linear),
            ],
            6,
        )
        .unwrap();
        let p = init_params(&spec, 2);
        let window: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
        let f = model_forward(&spec, &p, &window).unwrap();
        for k in 1..spec.layers.len() {
            let rerun = run_layers(&spec.layers[k..k + 1], &p.layers[k..k + 1], f.taps[k - 1].clone()).unwrap();
            assert_eq!(rerun[0], f.taps[k]);
        }
    }
}
