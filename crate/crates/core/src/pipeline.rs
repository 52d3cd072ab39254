//! File-level operations behind each CLI subcommand, and the full chain.
//!
//! Every operation reads its inputs through [`RunManifest::add_input`] (which
//! rejects artifacts whose producing manifest records a different hash) and
//! writes `<out>/<subcommand>.manifest.json` next to its outputs. Nothing
//! here depends on wall-clock time except the manifest timestamp.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::compression::{
    decode_quantized, prune_global_magnitude, quantize_params, save_quantized, weight_sparsity, FixedPointFormat,
    PruneReport,
};
use crate::costmodel::{build_report, DeploymentReport, Fixtures, LatencyModelConfig, MeasuredModel, ModelStats};
use crate::data::{generate_synthetic, load_csv, prepare, write_csv, NormalizationParams, PreparedData, WindowedDataset, DO_COLUMN};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::nn::io::{decode_model, save_model};
use crate::nn::{build_student, build_teacher, search_teacher_dims, TeacherDims};
use crate::split::{partition, DType, Deployed, PlanName, SplitManifest, SplitPlan};
use crate::training::{distill, metrics, save_history, train_teacher, Metrics, Teacher, TrainConfig};
use crate::wire::{run_edge, EdgeConfig, Server, ServerHandle};

pub const SERIES_FILE: &str = "series.csv";
pub const TEACHER_FILE: &str = "teacher.slm";
pub const STUDENT_FILE: &str = "student.slm";
pub const PRUNED_FILE: &str = "student_pruned.slm";
pub const QUANTIZED_FILE: &str = "student_q8.slq";

/// Length of the synthetic series (about nine years of daily values).
pub const DEFAULT_DAYS: usize = 3264;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_SPARSITY: f64 = 0.7;
/// Parameter count of the reference teacher.
pub const TEACHER_TARGET_PARAMS: usize = 39_951;
pub const TEACHER_SEARCH_MAX: usize = 128;

/// How a CSV is turned into windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    pub column: String,
    pub train_fraction: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            column: DO_COLUMN.to_string(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Train,
    #[default]
    Test,
}

impl std::str::FromStr for Segment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Segment::Train),
            "test" => Ok(Segment::Test),
            _ => Err(Error::InvalidArgument(format!("segment must be train or test, got {s:?}"))),
        }
    }
}

impl PreparedData {
    pub fn segment(&self, s: Segment) -> &WindowedDataset {
        match s {
            Segment::Train => &self.train,
            Segment::Test => &self.test,
        }
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn load_data(path: &Path, opts: &DataOptions, m: &mut RunManifest) -> Result<PreparedData> {
    m.add_input(path)?;
    Ok(prepare(&load_csv(path, &opts.column)?, opts.train_fraction)?)
}

/// Loads a float or quantized model file.
pub fn load_deployed(path: &Path, m: &mut RunManifest) -> Result<Deployed> {
    m.add_input(path)?;
    let bytes = fs::read(path)?;
    match decode_model(&bytes) {
        Ok((spec, params)) => Deployed::float(spec, params),
        Err(float_err) => match decode_quantized(&bytes) {
            Ok((spec, q)) => Deployed::quantized(spec, q),
            Err(_) => Err(float_err.into()),
        },
    }
}

/// A model file plus the precision it should be deployed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSource {
    pub path: PathBuf,
    /// `None` keeps the file's own precision.
    pub dtype: Option<DType>,
    /// Q-format used when a float file is quantized on load; checked
    /// against the stored format of a quantized file.
    pub format: Option<FixedPointFormat>,
}

impl ModelSource {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        ModelSource {
            path: path.into(),
            dtype: None,
            format: None,
        }
    }

    pub fn load(&self, m: &mut RunManifest) -> Result<Deployed> {
        let model = load_deployed(&self.path, m)?;
        match (model, self.dtype) {
            (Deployed::Float { spec, params }, Some(DType::Q8)) => {
                let q = quantize_params(&spec, &params, self.format.unwrap_or_default())?;
                Deployed::quantized(spec, q)
            }
            (Deployed::Quantized { .. }, Some(DType::F32)) => Err(Error::InvalidArgument(format!(
                "{} is quantized; it cannot be deployed as f32",
                self.path.display()
            ))),
            (model, _) => {
                if let (Some(stored), Some(wanted)) = (model.format(), self.format) {
                    if stored != wanted {
                        return Err(Error::InvalidArgument(format!(
                            "{} is stored as Q{stored}, not Q{wanted}",
                            self.path.display()
                        )));
                    }
                }
                Ok(model)
            }
        }
    }
}

/// Predictions of a deployed model over a dataset, in window order.
pub fn predict_all(model: &Deployed, data: &WindowedDataset) -> Result<Vec<f64>> {
    data.windows().map(|w| model.predict_value(w)).collect()
}

/// Prediction table: normalized values and the same values in data units.
pub fn write_predictions(path: &Path, data: &WindowedDataset, preds: &[f64], norm: &NormalizationParams) -> Result<()> {
    if preds.len() != data.len() {
        return Err(Error::Shape(format!("{} predictions for {} windows", preds.len(), data.len())));
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "window,target,prediction,target_denorm,prediction_denorm")?;
    for (i, (&y, &p)) in data.targets.iter().zip(preds).enumerate() {
        writeln!(w, "{i},{y},{p},{},{}", norm.invert(y), norm.invert(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(out: &Path, seed: u64, days: usize) -> Result<PathBuf> {
    ensure_dir(out)?;
    let mut m = RunManifest::new("gen-data", Some(seed), serde_json::json!({ "days": days }));
    let path = out.join(SERIES_FILE);
    write_csv(&generate_synthetic(seed, days)?, &path)?;
    m.add_output(&path)?;
    m.write(out)?;
    info!("wrote {} days to {}", days, path.display());
    Ok(path)
}

/// First hit of the teacher-dimension search, by the search's tie-break.
pub fn default_teacher_dims() -> Result<TeacherDims> {
    search_teacher_dims(TEACHER_TARGET_PARAMS, TEACHER_SEARCH_MAX)
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidSpec("no teacher dimensions reach the target parameter count".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: PathBuf,
    pub history: PathBuf,
    pub params: usize,
    pub final_metrics: Metrics,
}

fn finish_training(
    out: &Path,
    model_file: &str,
    history_file: &str,
    spec: &crate::nn::ModelSpec,
    params: &crate::nn::Parameters<f64>,
    history: &[crate::training::EpochReport],
    mut m: RunManifest,
) -> Result<TrainOutcome> {
    let model = out.join(model_file);
    let hist = out.join(history_file);
    save_model(&model, spec, params)?;
    save_history(history, &hist)?;
    m.add_output(&model)?;
    m.add_output(&hist)?;
    m.write(out)?;
    let last = history.last().expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history: hist,
        params: spec.param_count(),
        final_metrics: Metrics {
            mse: last.val_mse,
            mae: last.val_mae,
            r2: last.val_r2,
        },
    })
}

pub fn train_teacher_cmd(data: &Path, out: &Path, cfg: &TrainConfig, dims: TeacherDims, opts: &DataOptions) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let mut m = RunManifest::new(
        "train-teacher",
        Some(cfg.seed),
        serde_json::json!({ "train": to_value(cfg), "dims": to_value(&dims), "data": to_value(opts) }),
    );
    let d = load_data(data, opts, &mut m)?;
    let spec = build_teacher(dims);
    info!("training teacher {dims:?} ({} parameters)", spec.param_count());
    let (params, history) = train_teacher(&spec, &d.train, &d.test, cfg)?;
    finish_training(out, TEACHER_FILE, "teacher_history.csv", &spec, &params, &history, m)
}

pub fn distill_cmd(data: &Path, teacher: &Path, out: &Path, cfg: &TrainConfig, opts: &DataOptions) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let mut m = RunManifest::new(
        "distill",
        Some(cfg.seed),
        serde_json::json!({ "train": to_value(cfg), "data": to_value(opts) }),
    );
    let d = load_data(data, opts, &mut m)?;
    m.add_input(teacher)?;
    let (tspec, tparams) = decode_model(&fs::read(teacher)?)?;
    let tparams = tparams.cast::<f64>();
    let spec = build_student();
    info!("distilling into the student ({} parameters)", spec.param_count());
    let (params, history) = distill(
        &Teacher {
            spec: &tspec,
            params: &tparams,
        },
        &spec,
        &d.train,
        &d.test,
        cfg,
    )?;
    finish_training(out, STUDENT_FILE, "student_history.csv", &spec, &params, &history, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressOutcome {
    pub pruned: PathBuf,
    pub quantized: PathBuf,
    pub prune: PruneReport,
    pub format: String,
    /// Weight sparsity measured on the stored codes.
    pub quantized_sparsity: f64,
}

/// Prunes a float model and quantizes the result. No retraining happens in
/// between.
pub fn compress_cmd(model: &Path, out: &Path, sparsity: f64, format: FixedPointFormat) -> Result<CompressOutcome> {
    ensure_dir(out)?;
    let mut m = RunManifest::new(
        "compress",
        None,
        serde_json::json!({ "sparsity": sparsity, "format": format.to_string() }),
    );
    m.add_input(model)?;
    let (spec, params) = decode_model(&fs::read(model)?)?;
    let (pruned, report) = prune_global_magnitude(&params, sparsity)?;
    let q = quantize_params(&spec, &pruned, format)?;
    let pruned_path = out.join(PRUNED_FILE);
    let q_path = out.join(QUANTIZED_FILE);
    save_model(&pruned_path, &spec, &pruned)?;
    save_quantized(&q_path, &spec, &q)?;
    let outcome = CompressOutcome {
        pruned: pruned_path.clone(),
        quantized: q_path.clone(),
        prune: report,
        format: format.to_string(),
        quantized_sparsity: weight_sparsity(&q.codes.map(f32::from)),
    };
    // Paths are written relative to `out` so the summary is relocatable.
    let on_disk = CompressOutcome {
        pruned: PathBuf::from(PRUNED_FILE),
        quantized: PathBuf::from(QUANTIZED_FILE),
        ..outcome.clone()
    };
    let summary = out.join("compress.json");
    fs::write(&summary, serde_json::to_string_pretty(&on_disk)? + "\n")?;
    m.add_output(&pruned_path)?;
    m.add_output(&q_path)?;
    m.add_output(&summary)?;
    m.write(out)?;
    info!(
        "pruned {}/{} weights (sparsity {:.4}), quantized to Q{}",
        report.zeroed, report.total, report.sparsity, format
    );
    Ok(outcome)
}

pub fn split_manifest_file(plan: PlanName) -> String {
    format!("split-{}.json", plan.label().to_ascii_lowercase())
}

/// Writes the split manifest both halves are checked against.
pub fn split_cmd(model: &ModelSource, plan: PlanName, out: &Path) -> Result<(PathBuf, SplitManifest)> {
    ensure_dir(out)?;
    let mut m = RunManifest::new("split", None, serde_json::json!({ "plan": plan, "model": to_value(model) }));
    let deployed = model.load(&mut m)?;
    let plan = SplitPlan::preset(plan, deployed.spec())?;
    let (edge, server) = partition(&deployed, &plan)?;
    let sm = SplitManifest::new(&deployed, &plan)?;
    if !sm.compresses_input() && plan.cut_index < deployed.spec().layers.len() {
        log::warn!(
            "{}: z has {} elements, not fewer than the {} raw inputs",
            plan.name,
            sm.intermediate_elements,
            sm.input_elements
        );
    }
    info!(
        "{}: {} edge / {} server parameters, z = {} elements",
        plan.name,
        edge.param_count(),
        server.param_count(),
        sm.intermediate_elements
    );
    let path = out.join(split_manifest_file(plan.name));
    fs::write(&path, sm.to_json()? + "\n")?;
    m.add_output(&path)?;
    m.write(out)?;
    Ok((path, sm))
}

/// Binds the server half of `model` under `plan`.
pub fn bind_server(model: &ModelSource, plan: PlanName, endpoint: &str) -> Result<Server> {
    let mut m = RunManifest::new("serve", None, serde_json::Value::Null);
    let deployed = model.load(&mut m)?;
    let plan = SplitPlan::preset(plan, deployed.spec())?;
    let (_, server) = partition(&deployed, &plan)?;
    Server::bind(endpoint, server, SplitManifest::new(&deployed, &plan)?)
}

pub fn spawn_server(model: &ModelSource, plan: PlanName, endpoint: &str) -> Result<ServerHandle> {
    bind_server(model, plan, endpoint)?.spawn()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    pub predictions: PathBuf,
    pub windows: usize,
    pub metrics: Metrics,
}

fn infer_config(model: &ModelSource, data: &Path, segment: Segment, opts: &DataOptions) -> serde_json::Value {
    serde_json::json!({
        "model": to_value(model),
        "data": data.display().to_string(),
        "segment": segment,
        "options": to_value(opts),
    })
}

/// Local, unsplit inference.
pub fn infer_cmd(model: &ModelSource, data: &Path, segment: Segment, out_file: &Path, opts: &DataOptions) -> Result<InferOutcome> {
    let out = out_file.parent().unwrap_or(Path::new("."));
    ensure_dir(out)?;
    let mut m = RunManifest::new("infer", None, infer_config(model, data, segment, opts));
    let deployed = model.load(&mut m)?;
    let d = load_data(data, opts, &mut m)?;
    let ds = d.segment(segment);
    let preds = predict_all(&deployed, ds)?;
    write_predictions(out_file, ds, &preds, &d.norm)?;
    m.add_output(out_file)?;
    m.write(out)?;
    Ok(InferOutcome {
        predictions: out_file.to_path_buf(),
        windows: ds.len(),
        metrics: metrics(&ds.targets, &preds)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeInferOutcome {
    pub infer: InferOutcome,
    pub bytes_sent: usize,
    pub bytes_received: usize,
}

/// Split inference against a running server.
pub fn edge_infer_cmd(
    model: &ModelSource,
    plan: PlanName,
    endpoint: &str,
    data: &Path,
    segment: Segment,
    out_file: &Path,
    opts: &DataOptions,
) -> Result<EdgeInferOutcome> {
    let out = out_file.parent().unwrap_or(Path::new("."));
    ensure_dir(out)?;
    let mut cfg = infer_config(model, data, segment, opts);
    cfg["plan"] = to_value(&plan);
    cfg["endpoint"] = serde_json::Value::String(endpoint.to_string());
    let mut m = RunManifest::new("edge-infer", None, cfg);
    let deployed = model.load(&mut m)?;
    let d = load_data(data, opts, &mut m)?;
    let ds = d.segment(segment);
    let plan = SplitPlan::preset(plan, deployed.spec())?;
    let (edge, _) = partition(&deployed, &plan)?;
    let sm = SplitManifest::new(&deployed, &plan)?;
    let run = run_edge(&edge, &sm, ds.windows(), endpoint, &EdgeConfig::default());
    let failures = run.failures();
    let mut preds = Vec::with_capacity(ds.len());
    for (i, r) in run.results.into_iter().enumerate() {
        match r {
            Ok(z) => preds.push(z.scalar()?),
            Err(e) => {
                return Err(Error::InvalidArgument(format!(
                    "window {i} failed ({failures} of {} failed): {e}",
                    ds.len()
                )))
            }
        }
    }
    write_predictions(out_file, ds, &preds, &d.norm)?;
    m.add_output(out_file)?;
    m.write(out)?;
    Ok(EdgeInferOutcome {
        infer: InferOutcome {
            predictions: out_file.to_path_buf(),
            windows: ds.len(),
            metrics: metrics(&ds.targets, &preds)?,
        },
        bytes_sent: run.bytes_sent,
        bytes_received: run.bytes_received,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: String,
    pub parameters: usize,
    pub segment: Segment,
    pub windows: usize,
    pub metrics: Metrics,
}

pub fn eval_cmd(model: &ModelSource, data: &Path, segment: Segment, out_file: &Path, opts: &DataOptions) -> Result<EvalOutcome> {
    let out = out_file.parent().unwrap_or(Path::new("."));
    ensure_dir(out)?;
    let mut m = RunManifest::new("eval", None, infer_config(model, data, segment, opts));
    let deployed = model.load(&mut m)?;
    let d = load_data(data, opts, &mut m)?;
    let ds = d.segment(segment);
    let outcome = EvalOutcome {
        model: model.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        parameters: deployed.spec().param_count(),
        segment,
        windows: ds.len(),
        metrics: metrics(&ds.targets, &predict_all(&deployed, ds)?)?,
    };
    fs::write(out_file, serde_json::to_string_pretty(&outcome)? + "\n")?;
    m.add_output(out_file)?;
    m.write(out)?;
    Ok(outcome)
}

/// Report inputs; `quantized` is optional.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub teacher: &'a Path,
    pub student: &'a Path,
    pub quantized: Option<&'a Path>,
    pub data: Option<&'a Path>,
}

pub fn report_cmd(inputs: &ReportInputs<'_>, out: &Path, opts: &DataOptions, latency: &LatencyModelConfig) -> Result<DeploymentReport> {
    ensure_dir(out)?;
    let mut m = RunManifest::new("report", None, serde_json::json!({ "latency": to_value(latency), "data": to_value(opts) }));
    let teacher = load_deployed(inputs.teacher, &mut m)?;
    let student = load_deployed(inputs.student, &mut m)?;
    let quant = inputs.quantized.map(|p| load_deployed(p, &mut m)).transpose()?;
    let mut measured = Vec::new();
    if let Some(data) = inputs.data {
        let d = load_data(data, opts, &mut m)?;
        let mut measure = |name: &str, model: &Deployed| -> Result<()> {
            measured.push(MeasuredModel {
                name: name.to_string(),
                parameters: model.spec().param_count(),
                metrics: metrics(&d.test.targets, &predict_all(model, &d.test)?)?,
            });
            Ok(())
        };
        measure("teacher (f32)", &teacher)?;
        measure("student (f32)", &student)?;
        if let Some(q) = &quant {
            measure(&format!("student pruned Q{}", q.format().expect("quantized")), q)?;
        }
    }
    let stats = ModelStats {
        teacher_params: teacher.spec().param_count(),
        student_params: student.spec().param_count(),
        measured,
    };
    let report = build_report(student.spec(), &Fixtures::bundled(), &stats, latency)?;
    for (name, body) in [
        ("report.csv", report.to_csv()),
        ("report.txt", report.to_text()),
        ("report.json", serde_json::to_string_pretty(&report)? + "\n"),
    ] {
        let p = out.join(name);
        fs::write(&p, body)?;
        m.add_output(&p)?;
    }
    m.write(out)?;
    Ok(report)
}

/// Settings for [`run_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub days: usize,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub teacher_dims: TeacherDims,
    pub sparsity: f64,
    pub format: FixedPointFormat,
    /// Plan exercised over loopback TCP, if any.
    pub loopback_plan: Option<PlanName>,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Result<Self> {
        let mut teacher = TrainConfig::teacher_default();
        let mut student = TrainConfig::student_default();
        teacher.seed = seed;
        student.seed = seed;
        Ok(PipelineConfig {
            seed,
            days: DEFAULT_DAYS,
            teacher,
            student,
            teacher_dims: default_teacher_dims()?,
            sparsity: DEFAULT_SPARSITY,
            format: FixedPointFormat::default(),
            loopback_plan: Some(PlanName::SplitA),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub teacher: TrainOutcome,
    pub student: TrainOutcome,
    pub compress: CompressOutcome,
    pub student_eval: EvalOutcome,
    pub quantized_eval: EvalOutcome,
    pub loopback: Option<EdgeInferOutcome>,
    pub report: DeploymentReport,
}

/// gen-data → train-teacher → distill → compress → split (all presets) →
/// infer / eval → optional loopback serve + edge-infer → report, all in `out`.
pub fn run_pipeline(out: &Path, cfg: &PipelineConfig) -> Result<PipelineSummary> {
    let opts = DataOptions::default();
    let series = gen_data(out, cfg.seed, cfg.days)?;
    let teacher = train_teacher_cmd(&series, out, &cfg.teacher, cfg.teacher_dims, &opts)?;
    let student = distill_cmd(&series, &teacher.model, out, &cfg.student, &opts)?;
    let compress = compress_cmd(&student.model, out, cfg.sparsity, cfg.format)?;
    let quantized = ModelSource::file(&compress.quantized);
    for plan in PlanName::PRESETS {
        split_cmd(&quantized, plan, out)?;
    }
    let student_eval = eval_cmd(&ModelSource::file(&student.model), &series, Segment::Test, &out.join("eval-student.json"), &opts)?;
    let quantized_eval = eval_cmd(&quantized, &series, Segment::Test, &out.join("eval-quantized.json"), &opts)?;
    infer_cmd(&quantized, &series, Segment::Test, &out.join("predictions.csv"), &opts)?;
    let loopback = match cfg.loopback_plan {
        Some(plan) => {
            let server = spawn_server(&quantized, plan, "127.0.0.1:0")?;
            let endpoint = server.local_addr().to_string();
            let r = edge_infer_cmd(
                &quantized,
                plan,
                &endpoint,
                &series,
                Segment::Test,
                &out.join("predictions-edge.csv"),
                &opts,
            );
            server.shutdown();
            Some(r?)
        }
        None => None,
    };
    let report = report_cmd(
        &ReportInputs {
            teacher: &teacher.model,
            student: &student.model,
            quantized: Some(&compress.quantized),
            data: Some(&series),
        },
        out,
        &opts,
        &LatencyModelConfig::default(),
    )?;
    Ok(PipelineSummary {
        teacher,
        student,
        compress,
        student_eval,
        quantized_eval,
        loopback,
        report,
    })
}
