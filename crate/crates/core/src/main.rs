use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use splitlstm::compression::FixedPointFormat;
use splitlstm::costmodel::LatencyModelConfig;
use splitlstm::nn::TeacherDims;
use splitlstm::pipeline::{self, DataOptions, ModelSource, ReportInputs, Segment};
use splitlstm::split::{DType, PlanName};
use splitlstm::training::TrainConfig;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "splitlstm", version, about = "Compress, split and serve a small LSTM forecaster")]
struct Cli {
    /// Seed for every random choice (overrides any seed in --config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Input CSV (header row, one row per day).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = splitlstm::data::DO_COLUMN)]
    column: String,
    #[arg(long, default_value_t = pipeline::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

impl DataArgs {
    fn options(&self) -> DataOptions {
        DataOptions {
            column: self.column.clone(),
            train_fraction: self.train_fraction,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Deployment precision; q8 quantizes a float file on load.
    #[arg(long)]
    dtype: Option<DType>,
    /// Fixed-point format I.F for q8.
    #[arg(long)]
    format: Option<FixedPointFormat>,
}

impl ModelArgs {
    fn source(&self) -> ModelSource {
        ModelSource {
            path: self.model.clone(),
            dtype: self.dtype,
            format: self.format,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the seeded synthetic series as CSV.
    GenData {
        #[arg(long, default_value_t = pipeline::DEFAULT_DAYS)]
        days: usize,
    },
    /// Train the teacher on true labels.
    TrainTeacher {
        #[command(flatten)]
        data: DataArgs,
        /// Teacher widths h1,d,h2 (default: first dimension-search hit).
        #[arg(long, value_parser = parse_dims)]
        dims: Option<TeacherDims>,
    },
    /// Distill the student from a trained teacher.
    Distill {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Prune and quantize a float model.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_SPARSITY)]
        sparsity: f64,
        #[arg(long, default_value = "3.5")]
        format: FixedPointFormat,
    },
    /// Write the split manifest for a plan.
    Split {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        plan: PlanName,
    },
    /// Serve the server half until interrupted.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        plan: PlanName,
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
    },
    /// Run the edge half against a server and write predictions.
    EdgeInfer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        plan: PlanName,
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        segment: Segment,
        #[arg(long, default_value = "predictions-edge.csv")]
        file: String,
    },
    /// Unsplit local inference; writes one prediction row per window.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        segment: Segment,
        #[arg(long, default_value = "predictions.csv")]
        file: String,
    },
    /// MAE, MSE and R² of a model on one segment.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        segment: Segment,
    },
    /// Deployment report beside the reference figures.
    Report {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        quantized: Option<PathBuf>,
        /// Data for measured metrics.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = splitlstm::data::DO_COLUMN)]
        column: String,
    },
}

fn parse_dims(s: &str) -> Result<TeacherDims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [h1, d, h2] if h1 > 0 && d > 0 && h2 > 0 => Ok(TeacherDims::new(h1, d, h2)),
        _ => Err("expected three positive integers h1,d,h2".into()),
    }
}

enum Failure {
    Usage(String),
    Runtime(splitlstm::Error),
}

impl From<splitlstm::Error> for Failure {
    fn from(e: splitlstm::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn train_config(cli: &Cli, default: TrainConfig) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?,
        None => default,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(splitlstm::Error::from)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { days } => {
            let path = pipeline::gen_data(out, cli.seed.unwrap_or(DEFAULT_SEED), *days)?;
            println!("{}", path.display());
        }
        Command::TrainTeacher { data, dims } => {
            let cfg = train_config(cli, TrainConfig::teacher_default())?;
            let dims = match dims {
                Some(d) => *d,
                None => pipeline::default_teacher_dims()?,
            };
            print_json(&pipeline::train_teacher_cmd(&data.data, out, &cfg, dims, &data.options())?)?;
        }
        Command::Distill { data, teacher } => {
            let cfg = train_config(cli, TrainConfig::student_default())?;
            print_json(&pipeline::distill_cmd(&data.data, teacher, out, &cfg, &data.options())?)?;
        }
        Command::Compress { model, sparsity, format } => {
            print_json(&pipeline::compress_cmd(model, out, *sparsity, *format)?)?;
        }
        Command::Split { model, plan } => {
            let (path, manifest) = pipeline::split_cmd(&model.source(), *plan, out)?;
            print_json(&manifest)?;
            info!("wrote {}", path.display());
        }
        Command::Serve {
            model,
            plan,
            endpoint,
        } => {
            let server = pipeline::bind_server(&model.source(), *plan, endpoint)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| Failure::Runtime(splitlstm::Error::InvalidArgument(format!("signal handler: {e}"))))?;
            println!("listening on {}", server.local_addr()?);
            server.run(&stop);
        }
        Command::EdgeInfer {
            model,
            plan,
            endpoint,
            data,
            segment,
            file,
        } => {
            let r = pipeline::edge_infer_cmd(
                &model.source(),
                *plan,
                endpoint,
                &data.data,
                *segment,
                &out.join(file),
                &data.options(),
            )?;
            print_json(&r)?;
        }
        Command::Infer {
            model,
            data,
            segment,
            file,
        } => {
            let r = pipeline::infer_cmd(&model.source(), &data.data, *segment, &out.join(file), &data.options())?;
            print_json(&r)?;
        }
        Command::Eval { model, data, segment } => {
            let stem = model.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let file = out.join(format!("eval-{stem}.json"));
            let r = pipeline::eval_cmd(&model.source(), &data.data, *segment, &file, &data.options())?;
            print_json(&r)?;
        }
        Command::Report {
            teacher,
            student,
            quantized,
            data,
            column,
        } => {
            let latency = match &cli.config {
                Some(p) => load_latency(p)?,
                None => LatencyModelConfig::default(),
            };
            let opts = DataOptions {
                column: column.clone(),
                ..DataOptions::default()
            };
            let report = pipeline::report_cmd(
                &ReportInputs {
                    teacher,
                    student,
                    quantized: quantized.as_deref(),
                    data: data.as_deref(),
                },
                out,
                &opts,
                &latency,
            )?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn load_latency(p: &Path) -> Result<LatencyModelConfig, Failure> {
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?;
    let cfg: LatencyModelConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLITLSTM_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
