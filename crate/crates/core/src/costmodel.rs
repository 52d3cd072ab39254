//! Deployment arithmetic: scalability, a calibrated latency model, and the
//! per-variant report set beside the reference implementation figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::compression_ratio;
use crate::error::{Error, Result};
use crate::nn::{model_size_kb, LayerSpec, ModelSpec};
use crate::split::{intermediate_size, DType, PlanName, SplitPlan};
use crate::training::Metrics;
use crate::wire::wire_bytes_per_window;

/// Relative tolerance for treating a resource ratio as an integer, so that
/// e.g. `100 / (100 / 3 · 3)` is not floored to 2.
const RATIO_SNAP: f64 = 1e-9;

fn snapped_floor(r: f64) -> f64 {
    let nearest = r.round();
    if (r - nearest).abs() <= RATIO_SNAP * r.abs().max(1.0) {
        nearest
    } else {
        r.floor()
    }
}

/// Amounts of the four resource classes (absolute or percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub bram: f64,
    pub dsp: f64,
    pub lut: f64,
    pub ff: f64,
}

impl Resources {
    pub fn uniform(v: f64) -> Self {
        Resources {
            bram: v,
            dsp: v,
            lut: v,
            ff: v,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.bram, self.dsp, self.lut, self.ff]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceUtilization {
    pub bram: f64,
    pub dsp: f64,
    pub lut: f64,
    pub ff: f64,
    /// Peak utilization of the whole integrated design, infrastructure included.
    pub overall_max: f64,
}

impl ResourceUtilization {
    pub fn pe(&self) -> Resources {
        Resources {
            bram: self.bram,
            dsp: self.dsp,
            lut: self.lut,
            ff: self.ff,
        }
    }
}

/// Instances that fit: `min_r floor(total_r / pe_r)`.
pub fn scalability(total: &Resources, pe: &Resources) -> Result<u32> {
    let mut best = f64::INFINITY;
    for (t, p) in total.as_array().into_iter().zip(pe.as_array()) {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("processing-element usage must be positive, got {p}")));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("total resources must be non-negative, got {t}")));
        }
        best = best.min(snapped_floor(t / p));
    }
    Ok(best as u32)
}

/// Instances of the whole integrated design that fit: `floor(100 / overall_max)`.
pub fn scalability_from_design(u: &ResourceUtilization) -> Result<u32> {
    if !(u.overall_max > 0.0 && u.overall_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("overall utilization must be positive, got {}", u.overall_max)));
    }
    Ok(snapped_floor(100.0 / u.overall_max) as u32)
}

/// Operation counts for one window through a set of layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Workload {
    pub macs: u64,
    /// Nonlinear evaluations: 5 per LSTM unit per step (3 sigmoid, 2 tanh)
    /// plus one per relu output.
    pub activations: u64,
    /// Elements moved out of the accelerator.
    pub transferred: u64,
}

pub fn layer_workload(layer: &LayerSpec, steps: usize) -> Workload {
    let t = steps as u64;
    match *layer {
        LayerSpec::Lstm {
            input_size,
            hidden_size,
            ..
        } => {
            let (i, h) = (input_size as u64, hidden_size as u64);
            Workload {
                macs: t * 4 * h * (i + h),
                activations: t * 5 * h,
                transferred: 0,
            }
        }
        LayerSpec::Dense {
            input_size,
            output_size,
            activation,
            time_distributed,
        } => {
            let reps = if time_distributed { t } else { 1 };
            let (i, o) = (input_size as u64, output_size as u64);
            Workload {
                macs: reps * i * o,
                activations: if activation == crate::nn::Activation::Relu { reps * o } else { 0 },
                transferred: 0,
            }
        }
    }
}

/// Work done on the edge for one window under `plan`.
pub fn edge_workload(spec: &ModelSpec, plan: &SplitPlan) -> Result<Workload> {
    let z = intermediate_size(spec, plan)?;
    let mut w = Workload::default();
    for layer in &spec.layers[..plan.cut_index] {
        let l = layer_workload(layer, spec.window_length);
        w.macs += l.macs;
        w.activations += l.activations;
    }
    w.transferred = z as u64;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModelConfig {
    pub clock_mhz: f64,
    pub cycles_per_mac: f64,
    pub cycles_per_activation: f64,
    pub cycles_per_transferred_element: f64,
}

impl Default for LatencyModelConfig {
    /// The unique coefficients that reproduce 2.82, 2.85 and 3.54 µs at
    /// 80 MHz for the student's three variants (see [`calibrate`]).
    fn default() -> Self {
        LatencyModelConfig {
            clock_mhz: 80.0,
            cycles_per_mac: 278.0 / 20875.0,
            cycles_per_activation: 1398.0 / 20875.0,
            cycles_per_transferred_element: 4038.0 / 4175.0,
        }
    }
}

impl LatencyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.clock_mhz,
            self.cycles_per_mac,
            self.cycles_per_activation,
            self.cycles_per_transferred_element,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("latency model parameters must be positive".into()))
        }
    }

    pub fn cycles(&self, w: &Workload) -> f64 {
        self.cycles_per_mac * w.macs as f64
            + self.cycles_per_activation * w.activations as f64
            + self.cycles_per_transferred_element * w.transferred as f64
    }

    pub fn micros(&self, w: &Workload) -> f64 {
        self.cycles(w) / self.clock_mhz
    }
}

pub fn latency_estimate(spec: &ModelSpec, plan: &SplitPlan, cfg: &LatencyModelConfig) -> Result<f64> {
    Ok(cfg.micros(&edge_workload(spec, plan)?))
}

/// Solves for the three cycle coefficients that reproduce three measured
/// latencies exactly.
pub fn calibrate(samples: &[(Workload, f64); 3], clock_mhz: f64) -> Result<LatencyModelConfig> {
    let mut m = [[0.0f64; 4]; 3];
    for (row, (w, us)) in m.iter_mut().zip(samples) {
        *row = [w.macs as f64, w.activations as f64, w.transferred as f64, us * clock_mhz];
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("nonempty range");
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::InvalidArgument("calibration workloads are linearly dependent".into()));
        }
        m.swap(col, pivot);
        #[allow(clippy::needless_range_loop)]
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let cfg = LatencyModelConfig {
        clock_mhz,
        cycles_per_mac: m[0][3] / m[0][0],
        cycles_per_activation: m[1][3] / m[1][1],
        cycles_per_transferred_element: m[2][3] / m[2][2],
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFigures {
    pub name: String,
    pub parameters: usize,
    pub size_kb: f64,
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTable {
    pub teacher: ModelFigures,
    pub student: ModelFigures,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFigures {
    pub variant: PlanName,
    pub utilization: ResourceUtilization,
    pub latency_us: f64,
    pub frequency_mhz: f64,
    pub scalability: u32,
    pub power_w: f64,
}

/// Reference model and implementation figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    pub models: ModelTable,
    pub implementation: Vec<VariantFigures>,
}

const BUNDLED_FIXTURES: &str = include_str!("../fixtures/reference_figures.json");

impl Fixtures {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_FIXTURES).expect("bundled fixtures parse")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn variant(&self, name: PlanName) -> Result<&VariantFigures> {
        self.implementation
            .iter()
            .find(|v| v.variant == name)
            .ok_or_else(|| Error::InvalidArgument(format!("fixtures have no entry for {name}")))
    }

    /// The reference calibration samples, in preset order.
    pub fn latency_samples(&self, student: &ModelSpec) -> Result<[(Workload, f64); 3]> {
        let mut out = [(Workload::default(), 0.0); 3];
        for (slot, name) in out.iter_mut().zip(PlanName::PRESETS) {
            let plan = SplitPlan::preset(name, student)?;
            *slot = (edge_workload(student, &plan)?, self.variant(name)?.latency_us);
        }
        Ok(out)
    }
}

/// Measured quality of one model on the validation segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredModel {
    pub name: String,
    pub parameters: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub teacher_params: usize,
    pub student_params: usize,
    /// Validation results from an actual run, if any.
    pub measured: Vec<MeasuredModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: PlanName,
    pub cut_index: usize,
    pub edge_params: usize,
    pub server_params: usize,
    pub intermediate_elements: usize,
    pub input_elements: usize,
    pub wire_bytes_f32: usize,
    pub wire_bytes_q8: usize,
    pub edge_macs: u64,
    pub edge_activations: u64,
    pub sc_design: u32,
    pub sc_per_resource: u32,
    pub latency_est_us: f64,
    pub reference_sc: u32,
    pub reference_latency_us: f64,
    pub reference_power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_kb: f64,
    pub student_kb: f64,
    pub compression_ratio: f64,
    pub reference_compression_ratio: f64,
    pub latency_model: LatencyModelConfig,
    pub variants: Vec<VariantRow>,
    pub measured: Vec<MeasuredModel>,
    pub reference_models: ModelTable,
}

pub const REPORT_CSV_HEADER: &str = "variant,cut_index,edge_params,server_params,intermediate_elements,input_elements,\
wire_bytes_f32,wire_bytes_q8,student_size_kb,compression_ratio,sc_design,sc_per_resource,latency_est_us,\
reference_sc,reference_latency_us,reference_power_w";

pub fn build_report(
    student: &ModelSpec,
    fixtures: &Fixtures,
    stats: &ModelStats,
    cfg: &LatencyModelConfig,
) -> Result<DeploymentReport> {
    cfg.validate()?;
    student.validate_full()?;
    if stats.teacher_params == 0 || stats.student_params == 0 {
        return Err(Error::InvalidArgument("parameter counts must be positive".into()));
    }
    let mut variants = Vec::with_capacity(3);
    for name in PlanName::PRESETS {
        let fig = fixtures.variant(name)?;
        let plan = SplitPlan::preset(name, student)?;
        let z = intermediate_size(student, &plan)?;
        let work = edge_workload(student, &plan)?;
        let edge_params: usize = student.layers[..plan.cut_index].iter().map(LayerSpec::param_count).sum();
        variants.push(VariantRow {
            variant: name,
            cut_index: plan.cut_index,
            edge_params,
            server_params: student.param_count() - edge_params,
            intermediate_elements: z,
            input_elements: student.window_length * student.feature_count,
            wire_bytes_f32: wire_bytes_per_window(z, DType::F32),
            wire_bytes_q8: wire_bytes_per_window(z, DType::Q8),
            edge_macs: work.macs,
            edge_activations: work.activations,
            sc_design: scalability_from_design(&fig.utilization)?,
            sc_per_resource: scalability(&Resources::uniform(100.0), &fig.utilization.pe())?,
            latency_est_us: cfg.micros(&work),
            reference_sc: fig.scalability,
            reference_latency_us: fig.latency_us,
            reference_power_w: fig.power_w,
        });
    }
    Ok(DeploymentReport {
        teacher_params: stats.teacher_params,
        student_params: stats.student_params,
        teacher_kb: model_size_kb(stats.teacher_params),
        student_kb: model_size_kb(stats.student_params),
        compression_ratio: compression_ratio(stats.teacher_params, stats.student_params),
        reference_compression_ratio: fixtures.models.compression_ratio,
        latency_model: *cfg,
        variants,
        measured: stats.measured.clone(),
        reference_models: fixtures.models.clone(),
    })
}

impl DeploymentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.2},{:.2},{},{},{:.2},{},{:.2},{:.3}",
                v.variant,
                v.cut_index,
                v.edge_params,
                v.server_params,
                v.intermediate_elements,
                v.input_elements,
                v.wire_bytes_f32,
                v.wire_bytes_q8,
                self.student_kb,
                self.compression_ratio,
                v.sc_design,
                v.sc_per_resource,
                v.latency_est_us,
                v.reference_sc,
                v.reference_latency_us,
                v.reference_power_w
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Models");
        let _ = writeln!(
            s,
            "  teacher   {:>6} params  {:>7.2} KB   (reference {} / {:.2} KB)",
            self.teacher_params, self.teacher_kb, self.reference_models.teacher.parameters, self.reference_models.teacher.size_kb
        );
        let _ = writeln!(
            s,
            "  student   {:>6} params  {:>7.2} KB   (reference {} / {:.2} KB)",
            self.student_params, self.student_kb, self.reference_models.student.parameters, self.reference_models.student.size_kb
        );
        let _ = writeln!(
            s,
            "  compression ratio {:.2}x (reference {:.2}x)",
            self.compression_ratio, self.reference_compression_ratio
        );
        if !self.measured.is_empty() {
            let _ = writeln!(s, "\nValidation metrics (normalized scale)");
            for m in &self.measured {
                let _ = writeln!(
                    s,
                    "  {:<22} MAE {:.4}  MSE {:.4}  R2 {:.4}",
                    m.name, m.metrics.mae, m.metrics.mse, m.metrics.r2
                );
            }
            let t = &self.reference_models;
            let _ = writeln!(
                s,
                "  reference: teacher MAE {:.4} MSE {:.4} R2 {:.2}; student MAE {:.4} MSE {:.4} R2 {:.2}",
                t.teacher.mae, t.teacher.mse, t.teacher.r2, t.student.mae, t.student.mse, t.student.r2
            );
        }
        let _ = writeln!(s, "\nVariants");
        let _ = writeln!(
            s,
            "  {:<10} {:>3} {:>5} {:>6} {:>4} {:>4} {:>9} {:>8} {:>6} {:>6} {:>9} {:>9} {:>7}",
            "variant", "cut", "edge", "server", "z", "N", "wire f32", "wire q8", "SC", "SC/res", "lat est", "lat ref", "power"
        );
        for v in &self.variants {
            let _ = writeln!(
                s,
                "  {:<10} {:>3} {:>5} {:>6} {:>4} {:>4} {:>9} {:>8} {:>6} {:>6} {:>8.2}u {:>8.2}u {:>6.3}W",
                v.variant.label(),
                v.cut_index,
                v.edge_params,
                v.server_params,
                v.intermediate_elements,
                v.input_elements,
                v.wire_bytes_f32,
                v.wire_bytes_q8,
                format!("{}/{}", v.sc_design, v.reference_sc),
                v.sc_per_resource,
                v.latency_est_us,
                v.reference_latency_us,
                v.reference_power_w
            );
        }
        let _ = writeln!(
            s,
            "\nSC is floor(100 / overall utilization) against the reference value; SC/res applies the\n\
             per-resource minimum to the accelerator rows alone. Latency uses {:.6} / {:.6} / {:.6}\n\
             cycles per MAC / activation / transferred element at {} MHz.",
            self.latency_model.cycles_per_mac,
            self.latency_model.cycles_per_activation,
            self.latency_model.cycles_per_transferred_element,
            self.latency_model.clock_mhz
        );
        for v in &self.variants {
            if v.intermediate_elements >= v.input_elements && v.cut_index < 4 {
                let _ = writeln!(
                    s,
                    "{}: z has {} elements, not fewer than the {} raw inputs.",
                    v.variant, v.intermediate_elements, v.input_elements
                );
            }
        }
        s
    }
}
