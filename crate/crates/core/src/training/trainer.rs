use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::backward::{backward, Batch, L2Scope, LossKind, Objective};
use super::loss::{metrics, Metrics};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::nn::{init_params, model_forward, ModelSpec, Parameters};

/// Stream id for the shuffle RNG, kept apart from weight initialization.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    /// True-label weight in the distillation loss.
    pub alpha: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub l2_scope: L2Scope,
}

impl TrainConfig {
    pub fn teacher_default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 32,
            learning_rate: 1e-3,
            l2_lambda: 1e-3,
            alpha: 1.0,
            seed: 42,
            loss_kind: LossKind::Mse,
            l2_scope: L2Scope::default(),
        }
    }

    pub fn student_default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 32,
            learning_rate: 1e-3,
            l2_lambda: 1e-2,
            alpha: 0.1,
            seed: 42,
            loss_kind: LossKind::Kd,
            l2_scope: L2Scope::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss_kind,
            alpha: self.alpha,
            l2_lambda: self.l2_lambda,
            l2_scope: self.l2_scope,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub val_r2: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("history csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_history(history: &[EpochReport], path: impl AsRef<Path>) -> Result<()> {
    write_history_csv(history, std::fs::File::create(path)?)
}

pub fn predict(spec: &ModelSpec, params: &Parameters<f64>, data: &WindowedDataset) -> Result<Vec<f64>> {
    data.windows().map(|x| model_forward(spec, params, x).map(|f| f.prediction)).collect()
}

pub fn evaluate(spec: &ModelSpec, params: &Parameters<f64>, data: &WindowedDataset) -> Result<Metrics> {
    metrics(&data.targets, &predict(spec, params, data)?)
}

/// Frozen model supplying soft targets during distillation.
pub struct Teacher<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a Parameters<f64>,
}

fn check_dataset(spec: &ModelSpec, data: &WindowedDataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} dataset is empty")));
    }
    if data.window_length != spec.window_length || spec.feature_count != 1 {
        return Err(Error::Shape(format!(
            "{what} windows have length {}, model expects {} × {}",
            data.window_length, spec.window_length, spec.feature_count
        )));
    }
    Ok(())
}

fn fit(
    spec: &ModelSpec,
    mut params: Parameters<f64>,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
    teacher: Option<&Teacher<'_>>,
) -> Result<(Parameters<f64>, Vec<EpochReport>)> {
    config.validate()?;
    spec.validate_full()?;
    params.check_against(spec)?;
    check_dataset(spec, train, "training")?;
    check_dataset(spec, val, "validation")?;
    if let Some(t) = teacher {
        t.spec.validate_full()?;
        t.params.check_against(t.spec)?;
        if t.spec.window_length != spec.window_length {
            return Err(Error::Shape("teacher and student window lengths differ".into()));
        }
    }
    let objective = config.objective();
    let mut opt = Adam::new(AdamConfig::new(config.learning_rate), params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| train.x(i)).collect();
            let teacher_outputs = teacher
                .map(|t| {
                    inputs
                        .iter()
                        .map(|x| model_forward(t.spec, t.params, x).map(|f| f.prediction))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            let batch = Batch {
                targets: chunk.iter().map(|&i| train.y(i)).collect(),
                inputs,
                teacher_outputs,
            };
            let g = backward(spec, &params, &batch, &objective)?;
            loss_sum += (g.data_loss + g.penalty) * chunk.len() as f64;
            opt.step(&mut params, &g.grads);
        }
        let m = evaluate(spec, &params, val)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse: m.mse,
            val_mae: m.mae,
            val_r2: m.r2,
        };
        if !report.train_loss.is_finite() || !m.mse.is_finite() {
            return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
        }
        info!(
            "epoch {epoch}/{}: loss {:.6} val mse {:.6} mae {:.6} r2 {:.4}",
            config.epochs, report.train_loss, m.mse, m.mae, m.r2
        );
        history.push(report);
    }
    Ok((params, history))
}

/// Trains from seeded initial weights on true labels.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
) -> Result<(Parameters<f64>, Vec<EpochReport>)> {
    if config.loss_kind != LossKind::Mse {
        return Err(Error::InvalidArgument("teacher training uses the MSE loss".into()));
    }
    fit(spec, init_params(spec, config.seed), train, val, config, None)
}

/// Trains `student_spec` against true labels and the frozen teacher's
/// per-batch predictions.
pub fn distill(
    teacher: &Teacher<'_>,
    student_spec: &ModelSpec,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
) -> Result<(Parameters<f64>, Vec<EpochReport>)> {
    if config.loss_kind != LossKind::Kd {
        return Err(Error::InvalidArgument("distillation uses the KD loss".into()));
    }
    fit(student_spec, init_params(student_spec, config.seed), train, val, config, Some(teacher))
}

/// Plain MSE training of any model; [`train_teacher`] without the loss check.
pub fn train_mse(
    spec: &ModelSpec,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
) -> Result<(Parameters<f64>, Vec<EpochReport>)> {
    let mut c = *config;
    c.loss_kind = LossKind::Mse;
    fit(spec, init_params(spec, c.seed), train, val, &c, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, prepare};
    use crate::nn::{build_student, build_teacher, TeacherDims};

    fn small_data() -> crate::data::PreparedData {
        prepare(&generate_synthetic(7, 200).unwrap(), 0.7).unwrap()
    }

    fn quick(mut c: TrainConfig) -> TrainConfig {
        c.epochs = 2;
        c
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::teacher_default().validate().is_ok());
        let mut c = TrainConfig::student_default();
        c.alpha = 1.2;
        assert!(c.validate().is_err());
        c.alpha = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 1;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let text = r#"{"batch_size":4,"epochs":3,"learning_rate":0.01,"l2_lambda":0.0,"alpha":0.5,"seed":9,"loss_kind":"KD"}"#;
        let c = TrainConfig::from_json(text).unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.loss_kind, LossKind::Kd);
        assert_eq!(c.l2_scope, L2Scope::default());
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let d = small_data();
        let spec = build_student();
        let c = quick(TrainConfig::teacher_default());
        let (p1, h1) = train_teacher(&spec, &d.train, &d.test, &c).unwrap();
        let (p2, h2) = train_teacher(&spec, &d.train, &d.test, &c).unwrap();
        assert_eq!(h1, h2);
        assert!(p1.values().zip(p2.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(h1.iter().all(|r| r.train_loss.is_finite() && r.val_mse.is_finite()));
        assert_eq!(h1.len(), 2);
    }

    #[test]
    fn distill_leaves_teacher_untouched_and_alpha_one_matches_mse() {
        let d = small_data();
        let tspec = build_teacher(TeacherDims::new(6, 5, 7));
        let tparams = init_params(&tspec, 3);
        let snapshot: Vec<u64> = tparams.values().map(f64::to_bits).collect();
        let sspec = build_student();
        let mut c = quick(TrainConfig::student_default());
        c.alpha = 1.0;
        let teacher = Teacher {
            spec: &tspec,
            params: &tparams,
        };
        let (ps, hs) = distill(&teacher, &sspec, &d.train, &d.test, &c).unwrap();
        assert_eq!(snapshot, tparams.values().map(f64::to_bits).collect::<Vec<_>>());
        let (pm, hm) = train_mse(&sspec, &d.train, &d.test, &c).unwrap();
        assert_eq!(hs, hm);
        assert!(ps.values().zip(pm.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn loss_kind_guards() {
        let d = small_data();
        let spec = build_student();
        assert!(train_teacher(&spec, &d.train, &d.test, &TrainConfig::student_default()).is_err());
        let teacher = Teacher {
            spec: &spec,
            params: &init_params(&spec, 0),
        };
        assert!(distill(&teacher, &spec, &d.train, &d.test, &TrainConfig::teacher_default()).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = [EpochReport {
            epoch: 1,
            train_loss: 0.5,
            val_mse: 0.25,
            val_mae: 0.4,
            val_r2: 0.9,
        }];
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "epoch,train_loss,val_mse,val_mae,val_r2");
        assert_eq!(s.lines().nth(1).unwrap(), "1,0.5,0.25,0.4,0.9");
    }

    #[test]
    fn training_reduces_validation_error() {
        let d = small_data();
        let spec = build_student();
        let mut c = TrainConfig::teacher_default();
        c.epochs = 6;
        c.learning_rate = 1e-2;
        c.l2_lambda = 0.0;
        let (_, h) = train_teacher(&spec, &d.train, &d.test, &c).unwrap();
        assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
    }
}
