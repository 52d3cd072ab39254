//! Edge/server partitioning at a layer boundary.
//!
//! Both halves evaluate their layers through the same routines as the
//! unsplit model ([`run_layers`] for float, [`QuantEngine::run_layers`] for
//! q8), so composing them reproduces the full forward pass bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::{dequantize, encode_quantized, FixedPointFormat, QuantEngine, QuantizedParameters};
use crate::error::{shape_err, Error, Result};
use crate::nn::io::encode_model;
use crate::nn::{model_forward, run_layers, LayerParams, ModelSpec, Parameters, Shape, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanName {
    #[serde(rename = "LSTM-DO-S")]
    LstmDoS,
    #[serde(rename = "Split-A")]
    SplitA,
    #[serde(rename = "Split-B")]
    SplitB,
    #[serde(rename = "custom")]
    Custom,
}

impl PlanName {
    pub const PRESETS: [PlanName; 3] = [PlanName::LstmDoS, PlanName::SplitA, PlanName::SplitB];

    pub fn label(self) -> &'static str {
        match self {
            PlanName::LstmDoS => "LSTM-DO-S",
            PlanName::SplitA => "Split-A",
            PlanName::SplitB => "Split-B",
            PlanName::Custom => "custom",
        }
    }
}

impl fmt::Display for PlanName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PlanName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm-do-s" => Ok(PlanName::LstmDoS),
            "split-a" => Ok(PlanName::SplitA),
            "split-b" => Ok(PlanName::SplitB),
            "custom" => Ok(PlanName::Custom),
            _ => Err(Error::InvalidPlan(format!("unknown plan {s:?}; expected lstm-do-s, split-a or split-b"))),
        }
    }
}

/// Layers `[0, cut_index)` run on the edge, the rest on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: PlanName,
    pub cut_index: usize,
}

/// Index one past the `n`-th LSTM layer (1-based `n`).
fn after_nth_lstm(spec: &ModelSpec, n: usize) -> Option<usize> {
    spec.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_lstm())
        .nth(n - 1)
        .map(|(k, _)| k + 1)
}

impl SplitPlan {
    /// Resolves a preset against a model: the whole model for LSTM-DO-S,
    /// through the second LSTM for Split-A, through the first for Split-B.
    pub fn preset(name: PlanName, spec: &ModelSpec) -> Result<Self> {
        let cut = match name {
            PlanName::LstmDoS => Some(spec.layers.len()),
            PlanName::SplitA => after_nth_lstm(spec, 2),
            PlanName::SplitB => after_nth_lstm(spec, 1),
            PlanName::Custom => return Err(Error::InvalidPlan("a custom plan needs an explicit cut index".into())),
        }
        .ok_or_else(|| Error::InvalidPlan(format!("{name} needs more LSTM layers than the model has")))?;
        let plan = SplitPlan { name, cut_index: cut };
        plan.validate(spec)?;
        Ok(plan)
    }

    pub fn custom(cut_index: usize) -> Self {
        SplitPlan {
            name: PlanName::Custom,
            cut_index,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let n = spec.layers.len();
        let cut = self.cut_index;
        if cut == 0 || cut > n {
            return Err(Error::InvalidPlan(format!("cut index {cut} outside 1..={n}")));
        }
        if !spec.layers[..cut].iter().any(|l| l.is_lstm()) {
            return Err(Error::InvalidPlan("the edge part must contain an LSTM layer".into()));
        }
        if cut < n && spec.lstm_count() < 2 {
            return Err(Error::InvalidPlan("splitting requires a model with at least two LSTM layers".into()));
        }
        if self.name != PlanName::Custom {
            let expected = match self.name {
                PlanName::LstmDoS => Some(n),
                PlanName::SplitA => after_nth_lstm(spec, 2),
                PlanName::SplitB => after_nth_lstm(spec, 1),
                PlanName::Custom => unreachable!(),
            };
            if expected != Some(cut) {
                return Err(Error::InvalidPlan(format!("{} does not cut this model at layer {cut}", self.name)));
            }
        }
        Ok(())
    }

    pub fn is_proper(&self, spec: &ModelSpec) -> bool {
        self.cut_index < spec.layers.len()
    }
}

/// Element count of the edge output `z`.
pub fn intermediate_size(spec: &ModelSpec, plan: &SplitPlan) -> Result<usize> {
    plan.validate(spec)?;
    Ok(spec.layer_shapes()?[plan.cut_index - 1].element_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "q8")]
    Q8,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "float32",
            DType::Q8 => "q8",
        })
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "float32" => Ok(DType::F32),
            "q8" => Ok(DType::Q8),
            _ => Err(Error::InvalidArgument(format!("unknown dtype {s:?}; expected f32 or q8"))),
        }
    }
}

/// A tensor crossing the split point, or a final prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Intermediate {
    F32(Vec<f32>),
    Q8 { codes: Vec<i8>, format: FixedPointFormat },
}

impl Intermediate {
    pub fn dtype(&self) -> DType {
        match self {
            Intermediate::F32(_) => DType::F32,
            Intermediate::Q8 { .. } => DType::Q8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Intermediate::F32(v) => v.len(),
            Intermediate::Q8 { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Intermediate::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Intermediate::Q8 { codes, format } => codes.iter().map(|&q| dequantize(q, *format)).collect(),
        }
    }

    /// The single value of a prediction.
    pub fn scalar(&self) -> Result<f64> {
        match self.to_f64().as_slice() {
            [v] => Ok(*v),
            other => shape_err(format!("expected a scalar, got {} elements", other.len())),
        }
    }
}

/// A full model in deployment precision.
#[derive(Debug, Clone)]
pub enum Deployed {
    Float {
        spec: ModelSpec,
        params: Parameters<f32>,
    },
    Quantized {
        spec: ModelSpec,
        params: QuantizedParameters,
        engine: QuantEngine,
    },
}

fn cast_window(window: &[f64]) -> Vec<f32> {
    window.iter().map(|&x| x as f32).collect()
}

impl Deployed {
    pub fn float(spec: ModelSpec, params: Parameters<f32>) -> Result<Self> {
        spec.validate_full()?;
        params.check_against(&spec)?;
        Ok(Deployed::Float { spec, params })
    }

    pub fn quantized(spec: ModelSpec, params: QuantizedParameters) -> Result<Self> {
        spec.validate_full()?;
        params.check_against(&spec)?;
        let engine = QuantEngine::new(params.format);
        Ok(Deployed::Quantized { spec, params, engine })
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Deployed::Float { spec, .. } | Deployed::Quantized { spec, .. } => spec,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Deployed::Float { .. } => DType::F32,
            Deployed::Quantized { .. } => DType::Q8,
        }
    }

    pub fn format(&self) -> Option<FixedPointFormat> {
        match self {
            Deployed::Float { .. } => None,
            Deployed::Quantized { params, .. } => Some(params.format),
        }
    }

    /// SHA-256 (hex) of the model's file encoding.
    pub fn file_hash(&self) -> Result<String> {
        let bytes = match self {
            Deployed::Float { spec, params } => encode_model(spec, params)?,
            Deployed::Quantized { spec, params, .. } => encode_quantized(spec, params)?,
        };
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    /// Unsplit inference; the result is a one-element [`Intermediate`].
    pub fn predict(&self, window: &[f64]) -> Result<Intermediate> {
        match self {
            Deployed::Float { spec, params } => {
                let y = model_forward(spec, params, &cast_window(window))?.prediction;
                Ok(Intermediate::F32(vec![y]))
            }
            Deployed::Quantized { spec, params, engine } => {
                let (code, _) = engine.forward(spec, params, window)?;
                Ok(Intermediate::Q8 {
                    codes: vec![code],
                    format: params.format,
                })
            }
        }
    }

    pub fn predict_value(&self, window: &[f64]) -> Result<f64> {
        self.predict(window)?.scalar()
    }
}

#[derive(Debug, Clone)]
enum HalfWeights {
    Float(Vec<LayerParams<f32>>),
    Quantized { layers: Vec<LayerParams<i8>>, engine: QuantEngine },
}

impl HalfWeights {
    fn param_count(&self) -> usize {
        match self {
            HalfWeights::Float(l) => l.iter().map(LayerParams::param_count).sum(),
            HalfWeights::Quantized { layers, .. } => layers.iter().map(LayerParams::param_count).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeModel {
    pub plan: SplitPlan,
    pub spec: ModelSpec,
    /// Shape of `z`.
    pub output_shape: Shape,
    weights: HalfWeights,
}

/// The server half; empty when the whole model runs on the edge.
#[derive(Debug, Clone)]
pub struct ServerModel {
    pub plan: SplitPlan,
    pub spec: Option<ModelSpec>,
    pub input_shape: Shape,
    weights: HalfWeights,
}

pub fn partition(model: &Deployed, plan: &SplitPlan) -> Result<(EdgeModel, ServerModel)> {
    let spec = model.spec();
    plan.validate(spec)?;
    let cut = plan.cut_index;
    let n = spec.layers.len();
    let edge_spec = spec.slice(0, cut)?;
    let server_spec = if cut < n { Some(spec.slice(cut, n)?) } else { None };
    let z_shape = edge_spec.output_shape()?;
    let (ew, sw) = match model {
        Deployed::Float { params, .. } => (
            HalfWeights::Float(params.layers[..cut].to_vec()),
            HalfWeights::Float(params.layers[cut..].to_vec()),
        ),
        Deployed::Quantized { params, engine, .. } => (
            HalfWeights::Quantized {
                layers: params.codes.layers[..cut].to_vec(),
                engine: engine.clone(),
            },
            HalfWeights::Quantized {
                layers: params.codes.layers[cut..].to_vec(),
                engine: engine.clone(),
            },
        ),
    };
    if let Some(s) = &server_spec {
        if s.input_shape() != z_shape {
            return shape_err(format!("edge emits {z_shape:?} but server expects {:?}", s.input_shape()));
        }
    }
    Ok((
        EdgeModel {
            plan: *plan,
            spec: edge_spec,
            output_shape: z_shape,
            weights: ew,
        },
        ServerModel {
            plan: *plan,
            spec: server_spec,
            input_shape: z_shape,
            weights: sw,
        },
    ))
}

impl EdgeModel {
    pub fn intermediate_size(&self) -> usize {
        self.output_shape.element_count()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn dtype(&self) -> DType {
        match self.weights {
            HalfWeights::Float(_) => DType::F32,
            HalfWeights::Quantized { .. } => DType::Q8,
        }
    }

    pub fn format(&self) -> Option<FixedPointFormat> {
        match &self.weights {
            HalfWeights::Float(_) => None,
            HalfWeights::Quantized { engine, .. } => Some(engine.format),
        }
    }

    /// `z = f_E(x)`.
    pub fn forward(&self, window: &[f64]) -> Result<Intermediate> {
        let expected = self.spec.input_shape().element_count();
        if window.len() != expected {
            return shape_err(format!("window has {} values, expected {expected}", window.len()));
        }
        let shape = self.spec.input_shape();
        match &self.weights {
            HalfWeights::Float(layers) => {
                let input = Signal::from_flat(shape, cast_window(window))?;
                let taps = run_layers(&self.spec.layers, layers, input)?;
                Ok(Intermediate::F32(taps.into_iter().last().expect("nonempty edge").into_vec()))
            }
            HalfWeights::Quantized { layers, engine } => {
                let input = Signal::from_flat(shape, engine.quantize_window(window))?;
                let taps = engine.run_layers(&self.spec.layers, layers, input)?;
                Ok(Intermediate::Q8 {
                    codes: taps.into_iter().last().expect("nonempty edge").into_vec(),
                    format: engine.format,
                })
            }
        }
    }
}

impl ServerModel {
    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.element_count()
    }

    pub fn dtype(&self) -> DType {
        match self.weights {
            HalfWeights::Float(_) => DType::F32,
            HalfWeights::Quantized { .. } => DType::Q8,
        }
    }

    /// `ŷ = f_S(z)`; a sequence-shaped `z` is read as row-major `[T × h]`.
    pub fn forward(&self, z: &Intermediate) -> Result<Intermediate> {
        if z.len() != self.input_size() {
            return shape_err(format!("intermediate has {} elements, server expects {}", z.len(), self.input_size()));
        }
        let out = match (&self.weights, z) {
            (HalfWeights::Float(layers), Intermediate::F32(v)) => match &self.spec {
                None => z.clone(),
                Some(spec) => {
                    let taps = run_layers(&spec.layers, layers, Signal::from_flat(self.input_shape, v.clone())?)?;
                    Intermediate::F32(taps.into_iter().last().expect("nonempty server").into_vec())
                }
            },
            (HalfWeights::Quantized { layers, engine }, Intermediate::Q8 { codes, format }) => {
                if *format != engine.format {
                    return Err(Error::InvalidArgument(format!("intermediate is Q{format}, server runs Q{}", engine.format)));
                }
                match &self.spec {
                    None => z.clone(),
                    Some(spec) => {
                        let input = Signal::from_flat(self.input_shape, codes.clone())?;
                        let taps = engine.run_layers(&spec.layers, layers, input)?;
                        Intermediate::Q8 {
                            codes: taps.into_iter().last().expect("nonempty server").into_vec(),
                            format: *format,
                        }
                    }
                }
            }
            _ => return Err(Error::InvalidArgument(format!("server runs {} but received {}", self.dtype(), z.dtype()))),
        };
        if out.len() != 1 {
            return shape_err("server output is not a scalar");
        }
        Ok(out)
    }
}

/// Compatibility record shipped with both halves and exchanged in HELLO.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    /// SHA-256 (hex) of the full deployed model file.
    pub model_hash: String,
    pub plan: PlanName,
    pub cut_index: usize,
    pub intermediate_elements: usize,
    /// `N = T · features`, for comparison with `intermediate_elements`.
    pub input_elements: usize,
    pub dtype: DType,
    /// `I.F` for q8.
    pub format: Option<String>,
    pub window_length: usize,
    pub feature_count: usize,
}

impl SplitManifest {
    pub fn new(model: &Deployed, plan: &SplitPlan) -> Result<Self> {
        let spec = model.spec();
        Ok(SplitManifest {
            model_hash: model.file_hash()?,
            plan: plan.name,
            cut_index: plan.cut_index,
            intermediate_elements: intermediate_size(spec, plan)?,
            input_elements: spec.window_length * spec.feature_count,
            dtype: model.dtype(),
            format: model.format().map(|f| f.to_string()),
            window_length: spec.window_length,
            feature_count: spec.feature_count,
        })
    }

    /// Whether `z` is smaller than the raw input window.
    pub fn compresses_input(&self) -> bool {
        self.intermediate_elements < self.input_elements
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
