//! Model architectures, parameter storage, and the floating-point forward pass.
//!
//! A model is an ordered stack of [`LayerSpec`]s. LSTM layers consume a
//! sequence and emit either the whole hidden-state sequence or only the last
//! hidden state; dense layers act on a vector or, when time-distributed, on
//! each timestep of a sequence independently.

pub mod arch;
pub mod forward;
pub mod io;
pub mod params;

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use arch::{
    build_student, build_teacher, model_size_kb, param_count, search_teacher_dims,
    teacher_param_count, TeacherDims, STUDENT_HIDDEN, WINDOW_LENGTH,
};
pub use forward::{lstm_cell_step, model_forward, run_layers, Forward, Signal};
pub use params::{init_params, ArrayRole, DenseWeights, LayerParams, LstmWeights, Parameters};

/// Scalar type used by the float engine: `f64` during training, `f32` for the
/// deployed model.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Lstm {
        input_size: usize,
        hidden_size: usize,
        return_sequences: bool,
    },
    Dense {
        input_size: usize,
        output_size: usize,
        activation: Activation,
        time_distributed: bool,
    },
}

impl LayerSpec {
    pub fn lstm(input_size: usize, hidden_size: usize, return_sequences: bool) -> Self {
        LayerSpec::Lstm {
            input_size,
            hidden_size,
            return_sequences,
        }
    }

    pub fn dense(input_size: usize, output_size: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            input_size,
            output_size,
            activation,
            time_distributed: false,
        }
    }

    pub fn time_distributed(input_size: usize, output_size: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            input_size,
            output_size,
            activation,
            time_distributed: true,
        }
    }

    pub fn input_size(&self) -> usize {
        match *self {
            LayerSpec::Lstm { input_size, .. } | LayerSpec::Dense { input_size, .. } => input_size,
        }
    }

    pub fn output_size(&self) -> usize {
        match *self {
            LayerSpec::Lstm { hidden_size, .. } => hidden_size,
            LayerSpec::Dense { output_size, .. } => output_size,
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, LayerSpec::Lstm { .. })
    }

    /// Whether the layer consumes a sequence rather than a single vector.
    pub fn consumes_sequence(&self) -> bool {
        match *self {
            LayerSpec::Lstm { .. } => true,
            LayerSpec::Dense {
                time_distributed, ..
            } => time_distributed,
        }
    }

    pub fn emits_sequence(&self) -> bool {
        match *self {
            LayerSpec::Lstm {
                return_sequences, ..
            } => return_sequences,
            LayerSpec::Dense {
                time_distributed, ..
            } => time_distributed,
        }
    }

    /// Closed-form number of scalars stored for this layer.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Lstm {
                input_size,
                hidden_size: h,
                ..
            } => 4 * (h * (input_size + h) + h),
            LayerSpec::Dense {
                input_size,
                output_size,
                ..
            } => output_size * input_size + output_size,
        }
    }

    /// Output shape given the shape the layer consumes.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let width = match input {
            Shape::Sequence { width, .. } | Shape::Vector(width) => width,
        };
        if width != self.input_size() {
            return Err(Error::Shape(format!(
                "layer expects input width {}, got {}",
                self.input_size(),
                width
            )));
        }
        match (input, self.consumes_sequence()) {
            (Shape::Sequence { steps, .. }, true) => Ok(if self.emits_sequence() {
                Shape::Sequence {
                    steps,
                    width: self.output_size(),
                }
            } else {
                Shape::Vector(self.output_size())
            }),
            (Shape::Vector(_), false) => Ok(Shape::Vector(self.output_size())),
            (Shape::Vector(_), true) => Err(Error::Shape(
                "layer requires a sequence input but its predecessor emits a vector".into(),
            )),
            (Shape::Sequence { .. }, false) => Err(Error::Shape(
                "dense layer after a sequence must be time-distributed".into(),
            )),
        }
    }
}

/// Shape of a signal flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Sequence { steps: usize, width: usize },
    Vector(usize),
}

impl Shape {
    pub fn element_count(&self) -> usize {
        match *self {
            Shape::Sequence { steps, width } => steps * width,
            Shape::Vector(w) => w,
        }
    }
}

/// An ordered layer stack plus the window geometry it is evaluated on.
///
/// The same type describes complete models and the edge/server halves of a
/// split model; the input shape is implied by the first layer (sequence of
/// `window_length` steps when it consumes sequences, a vector otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub window_length: usize,
    pub feature_count: usize,
}

impl ModelSpec {
    /// Builds a spec and checks the layer chain is shape-compatible.
    pub fn new(layers: Vec<LayerSpec>, window_length: usize) -> Result<Self> {
        let feature_count = layers
            .first()
            .map(LayerSpec::input_size)
            .ok_or_else(|| Error::InvalidSpec("model has no layers".into()))?;
        let spec = ModelSpec {
            layers,
            window_length,
            feature_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_shape(&self) -> Shape {
        match self.layers.first() {
            Some(l) if !l.consumes_sequence() => Shape::Vector(self.feature_count),
            _ => Shape::Sequence {
                steps: self.window_length,
                width: self.feature_count,
            },
        }
    }

    /// Structural validation: positive sizes and a shape-compatible chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        if self.window_length == 0 || self.feature_count == 0 {
            return Err(Error::InvalidSpec(
                "window_length and feature_count must be positive".into(),
            ));
        }
        if self.layers[0].input_size() != self.feature_count {
            return Err(Error::InvalidSpec(format!(
                "first layer input {} does not match feature_count {}",
                self.layers[0].input_size(),
                self.feature_count
            )));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.input_size() == 0 || l.output_size() == 0 {
                return Err(Error::InvalidSpec(format!("layer {k} has a zero size")));
            }
        }
        self.layer_shapes()
            .map(|_| ())
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    /// A complete forecasting model: consumes the window sequence and ends in
    /// a single scalar.
    pub fn validate_full(&self) -> Result<()> {
        self.validate()?;
        if !matches!(self.input_shape(), Shape::Sequence { .. }) {
            return Err(Error::InvalidSpec(
                "a full model must consume the input window as a sequence".into(),
            ));
        }
        if self.output_shape()? != Shape::Vector(1) {
            return Err(Error::InvalidSpec(
                "final layer must emit a single scalar".into(),
            ));
        }
        Ok(())
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            shape = l
                .output_shape(shape)
                .map_err(|e| Error::Shape(format!("layer {k}: {e}")))?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self
            .layer_shapes()?
            .last()
            .expect("validated spec has at least one layer"))
    }

    pub fn lstm_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_lstm()).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Sub-spec covering `layers[range]`, with the window geometry kept.
    pub fn slice(&self, start: usize, end: usize) -> Result<ModelSpec> {
        if start >= end || end > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer range {start}..{end} out of bounds for {} layers",
                self.layers.len()
            )));
        }
        let layers = self.layers[start..end].to_vec();
        let spec = ModelSpec {
            feature_count: layers[0].input_size(),
            layers,
            window_length: self.window_length,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_after_sequence_must_be_time_distributed() {
        let err = ModelSpec::new(
            vec![
                LayerSpec::lstm(1, 4, true),
                LayerSpec::dense(4, 1, Activation::Linear),
            ],
            15,
        );
        assert!(err.is_err());
    }

    #[test]
    fn lstm_after_vector_is_rejected() {
        let err = ModelSpec::new(
            vec![LayerSpec::lstm(1, 4, false), LayerSpec::lstm(4, 2, false)],
            15,
        );
        assert!(err.is_err());
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let err = ModelSpec::new(
            vec![LayerSpec::lstm(1, 4, false), LayerSpec::dense(5, 1, Activation::Linear)],
            15,
        );
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_sized_layer_is_rejected() {
        let err = ModelSpec::new(vec![LayerSpec::lstm(1, 0, false)], 15);
        assert!(err.is_err());
    }

    #[test]
    fn full_model_must_end_in_scalar() {
        let spec = ModelSpec::new(vec![LayerSpec::lstm(1, 4, false)], 15).unwrap();
        assert!(spec.validate_full().is_err());
        let spec = ModelSpec::new(
            vec![LayerSpec::lstm(1, 4, false), LayerSpec::dense(4, 1, Activation::Linear)],
            15,
        )
        .unwrap();
        spec.validate_full().unwrap();
    }

    #[test]
    fn server_half_with_dense_head_takes_vector_input() {
        let spec = build_student();
        let server = spec.slice(2, 4).unwrap();
        assert_eq!(server.input_shape(), Shape::Vector(5));
        let server_b = spec.slice(1, 4).unwrap();
        assert_eq!(
            server_b.input_shape(),
            Shape::Sequence {
                steps: 15,
                width: 10
            }
        );
    }
}
