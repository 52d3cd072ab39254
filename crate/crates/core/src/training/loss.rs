use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if a.len() != b.len() {
        return shape_err(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// Mean of squared residuals.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// `alpha · MSE(y, ŷ) + (1 − alpha) · MSE(w, ŷ)` where `w` are the teacher's
/// predictions.
pub fn kd_loss(y: &[f64], yhat_student: &[f64], w_teacher: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    check_pair(y, yhat_student)?;
    check_pair(w_teacher, yhat_student)?;
    Ok(alpha * mse(y, yhat_student)? + (1.0 - alpha) * mse(w_teacher, yhat_student)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// MSE, MAE and R². Fails with [`Error::UndefinedR2`] when `y` is constant.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(Metrics {
        mse: ss_res / n,
        mae,
        r2: 1.0 - ss_res / ss_tot,
    })
}
