//! Weight storage.
//!
//! LSTM kernels are gate-blocked in the order `[input, forget, candidate,
//! output]`: rows `k*h..(k+1)*h` of `w`, `u` and `b` belong to gate `k`.
//! All matrices are row-major `[rows × cols]`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, ModelSpec, Real};
use crate::error::{Error, Result};

/// Number of LSTM gates.
pub const GATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<T> {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `[4h × input_size]`
    pub w: Vec<T>,
    /// `[4h × h]`
    pub u: Vec<T>,
    /// `[4h]`
    pub b: Vec<T>,
}

impl<T: Copy + Default> LstmWeights<T> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let rows = GATES * hidden_size;
        LstmWeights {
            input_size,
            hidden_size,
            w: vec![T::default(); rows * input_size],
            u: vec![T::default(); rows * hidden_size],
            b: vec![T::default(); rows],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    /// Forget-gate slice of the bias vector.
    pub fn forget_bias(&self) -> &[T] {
        &self.b[self.hidden_size..2 * self.hidden_size]
    }

    fn check(&self) -> Result<()> {
        let rows = GATES * self.hidden_size;
        if self.w.len() != rows * self.input_size
            || self.u.len() != rows * self.hidden_size
            || self.b.len() != rows
        {
            return Err(Error::Shape(format!(
                "LSTM weights inconsistent with input {} / hidden {}",
                self.input_size, self.hidden_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights<T> {
    pub input_size: usize,
    pub output_size: usize,
    /// `[out × in]`
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Copy + Default> DenseWeights<T> {
    pub fn zeros(input_size: usize, output_size: usize) -> Self {
        DenseWeights {
            input_size,
            output_size,
            w: vec![T::default(); input_size * output_size],
            b: vec![T::default(); output_size],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn check(&self) -> Result<()> {
        if self.w.len() != self.input_size * self.output_size || self.b.len() != self.output_size {
            return Err(Error::Shape(format!(
                "dense weights inconsistent with {}→{}",
                self.input_size, self.output_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Lstm(LstmWeights<T>),
    Dense(DenseWeights<T>),
}

/// What a stored array is, used for L2 scoping, pruning and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrayRole {
    /// LSTM input kernel `W`.
    InputKernel,
    /// LSTM recurrent kernel `U`.
    RecurrentKernel,
    /// Dense kernel `W`.
    DenseKernel,
    Bias,
}

impl ArrayRole {
    pub fn is_weight(self) -> bool {
        !matches!(self, ArrayRole::Bias)
    }
}

impl<T: Copy + Default> LayerParams<T> {
    pub fn zeros_for(layer: &LayerSpec) -> Self {
        match *layer {
            LayerSpec::Lstm {
                input_size,
                hidden_size,
                ..
            } => LayerParams::Lstm(LstmWeights::zeros(input_size, hidden_size)),
            LayerSpec::Dense {
                input_size,
                output_size,
                ..
            } => LayerParams::Dense(DenseWeights::zeros(input_size, output_size)),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Lstm(l) => l.param_count(),
            LayerParams::Dense(d) => d.param_count(),
        }
    }

    /// Arrays in serialization order: `W`, then `U` for LSTM, then `b`.
    pub fn arrays(&self) -> Vec<(ArrayRole, &[T])> {
        match self {
            LayerParams::Lstm(l) => vec![
                (ArrayRole::InputKernel, l.w.as_slice()),
                (ArrayRole::RecurrentKernel, l.u.as_slice()),
                (ArrayRole::Bias, l.b.as_slice()),
            ],
            LayerParams::Dense(d) => vec![
                (ArrayRole::DenseKernel, d.w.as_slice()),
                (ArrayRole::Bias, d.b.as_slice()),
            ],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<(ArrayRole, &mut Vec<T>)> {
        match self {
            LayerParams::Lstm(l) => vec![
                (ArrayRole::InputKernel, &mut l.w),
                (ArrayRole::RecurrentKernel, &mut l.u),
                (ArrayRole::Bias, &mut l.b),
            ],
            LayerParams::Dense(d) => vec![
                (ArrayRole::DenseKernel, &mut d.w),
                (ArrayRole::Bias, &mut d.b),
            ],
        }
    }

    fn matches(&self, layer: &LayerSpec) -> Result<()> {
        match (self, layer) {
            (
                LayerParams::Lstm(l),
                LayerSpec::Lstm {
                    input_size,
                    hidden_size,
                    ..
                },
            ) if l.input_size == *input_size && l.hidden_size == *hidden_size => l.check(),
            (
                LayerParams::Dense(d),
                LayerSpec::Dense {
                    input_size,
                    output_size,
                    ..
                },
            ) if d.input_size == *input_size && d.output_size == *output_size => d.check(),
            _ => Err(Error::Shape(format!(
                "parameters do not match layer {layer:?}"
            ))),
        }
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> LayerParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| f(x)).collect::<Vec<U>>();
        match self {
            LayerParams::Lstm(l) => LayerParams::Lstm(LstmWeights {
                input_size: l.input_size,
                hidden_size: l.hidden_size,
                w: conv(&l.w),
                u: conv(&l.u),
                b: conv(&l.b),
            }),
            LayerParams::Dense(d) => LayerParams::Dense(DenseWeights {
                input_size: d.input_size,
                output_size: d.output_size,
                w: conv(&d.w),
                b: conv(&d.b),
            }),
        }
    }
}

/// Per-layer weights, ordered as the layers of the owning [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Copy + Default> Parameters<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Parameters {
            layers: spec.layers.iter().map(LayerParams::zeros_for).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    /// Checks every layer's arrays against the spec.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (p, l) in self.layers.iter().zip(&spec.layers) {
            p.matches(l)?;
        }
        Ok(())
    }

    pub fn arrays(&self) -> impl Iterator<Item = (ArrayRole, &[T])> + '_ {
        self.layers.iter().flat_map(LayerParams::arrays)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = (ArrayRole, &mut Vec<T>)> + '_ {
        self.layers.iter_mut().flat_map(LayerParams::arrays_mut)
    }

    /// All scalars in serialization order.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.arrays().flat_map(|(_, a)| a.iter().copied())
    }

    /// Elementwise conversion preserving layout.
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Parameters<U> {
        Parameters {
            layers: self.layers.iter().map(|l| l.map(&f)).collect(),
        }
    }

    /// Layers `start..end`, copied unchanged.
    pub fn slice(&self, start: usize, end: usize) -> Parameters<T> {
        Parameters {
            layers: self.layers[start..end].to_vec(),
        }
    }
}

impl<T: Real> Parameters<T> {
    pub fn cast<U: Real>(&self) -> Parameters<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }
}

/// Glorot-uniform kernels, zero biases except the LSTM forget-gate block,
/// which starts at 1.0. Deterministic in `seed`.
///
/// Fan-in/fan-out for an `[rows × cols]` kernel are `cols` and `rows`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Parameters<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::zeros(spec);
    for layer in &mut params.layers {
        match layer {
            LayerParams::Lstm(l) => {
                let rows = GATES * l.hidden_size;
                fill_glorot(&mut l.w, rows, l.input_size, &mut rng);
                fill_glorot(&mut l.u, rows, l.hidden_size, &mut rng);
                let h = l.hidden_size;
                l.b[h..2 * h].fill(1.0);
            }
            LayerParams::Dense(d) => {
                fill_glorot(&mut d.w, d.output_size, d.input_size, &mut rng);
            }
        }
    }
    params
}

fn fill_glorot(dst: &mut [f64], rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    for v in dst {
        *v = dist.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_student, build_teacher, TeacherDims};

    #[test]
    fn stored_scalars_match_closed_form() {
        for spec in [build_student(), build_teacher(TeacherDims::new(4, 3, 2))] {
            let p = Parameters::<f64>::zeros(&spec);
            assert_eq!(p.param_count(), spec.param_count());
            assert_eq!(p.values().count(), spec.param_count());
            for (layer, lp) in spec.layers.iter().zip(&p.layers) {
                assert_eq!(layer.param_count(), lp.param_count());
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = build_student();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a, b);
        let c = init_params(&spec, 8);
        assert_ne!(a.layers[0], c.layers[0]);
    }

    #[test]
    fn init_forget_bias_is_one_and_other_biases_zero() {
        let spec = build_student();
        let p = init_params(&spec, 1);
        for layer in &p.layers {
            match layer {
                LayerParams::Lstm(l) => {
                    assert!(l.forget_bias().iter().all(|&b| b == 1.0));
                    let h = l.hidden_size;
                    assert!(l.b[..h].iter().chain(&l.b[2 * h..]).all(|&b| b == 0.0));
                }
                LayerParams::Dense(d) => assert!(d.b.iter().all(|&b| b == 0.0)),
            }
        }
    }

    #[test]
    fn init_kernels_within_glorot_bound() {
        let spec = build_student();
        let p = init_params(&spec, 3);
        if let LayerParams::Lstm(l) = &p.layers[0] {
            let limit = (6.0f64 / (40 + 1) as f64).sqrt();
            assert!(l.w.iter().all(|w| w.abs() <= limit));
            let limit = (6.0f64 / (40 + 10) as f64).sqrt();
            assert!(l.u.iter().all(|w| w.abs() <= limit));
        } else {
            unreachable!();
        }
    }

    #[test]
    fn check_against_rejects_wrong_layer() {
        let spec = build_student();
        let mut p = Parameters::<f64>::zeros(&spec);
        p.layers.swap(0, 1);
        assert!(p.check_against(&spec).is_err());
    }
}
