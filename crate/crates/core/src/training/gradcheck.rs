//! Central finite-difference verification of [`backward`].

use serde::Serialize;

use super::backward::{backward, objective_value, Batch, Objective};
use crate::error::Result;
use crate::nn::{ModelSpec, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat parameter index of the worst relative error.
    pub worst_index: usize,
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient with `(J(θ+ε) − J(θ−ε)) / 2ε` for the
/// parameters at flat indices `indices` (all parameters when `None`).
pub fn finite_diff_check(
    spec: &ModelSpec,
    params: &Parameters<f64>,
    batch: &Batch<'_>,
    objective: &Objective,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let analytic: Vec<f64> = backward(spec, params, batch, objective)?.grads.values().collect();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for &k in indices {
        let orig = get_flat(&work, k);
        set_flat(&mut work, k, orig + step);
        let plus = objective_value(spec, &work, batch, objective)?;
        set_flat(&mut work, k, orig - step);
        let minus = objective_value(spec, &work, batch, objective)?;
        set_flat(&mut work, k, orig);
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic[k], numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic[k] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = k;
        }
    }
    Ok(report)
}

fn locate(params: &Parameters<f64>, mut k: usize) -> (usize, usize) {
    for (a, (_, arr)) in params.arrays().enumerate() {
        if k < arr.len() {
            return (a, k);
        }
        k -= arr.len();
    }
    panic!("flat index out of range");
}

fn get_flat(params: &Parameters<f64>, k: usize) -> f64 {
    let (a, i) = locate(params, k);
    params.arrays().nth(a).expect("array index").1[i]
}

fn set_flat(params: &mut Parameters<f64>, k: usize, v: f64) {
    let (a, i) = locate(params, k);
    params.arrays_mut().nth(a).expect("array index").1[i] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_student, build_teacher, init_params, TeacherDims};
    use crate::training::L2Scope;

    fn windows(n: usize, seed: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| (0..15).map(|t| 0.5 + 0.4 * ((t + 3 * k) as f64 * 0.37 + seed).sin()).collect())
            .collect()
    }

    #[test]
    fn student_mse_gradients_match() {
        let spec = build_student();
        let params = init_params(&spec, 3);
        let ws = windows(4, 0.1);
        let batch = Batch {
            inputs: ws.iter().map(|w| w.as_slice()).collect(),
            targets: vec![0.2, 0.9, 0.5, 0.4],
            teacher_outputs: None,
        };
        let obj = Objective::mse(0.01).with_scope(L2Scope::AllWeights);
        let r = finite_diff_check(&spec, &params, &batch, &obj, 1e-5, None).unwrap();
        assert_eq!(r.checked, 871);
        assert!(r.max_rel_error < 1e-4 || r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn student_kd_gradients_match() {
        let spec = build_student();
        let params = init_params(&spec, 5);
        let ws = windows(3, 1.3);
        let batch = Batch {
            inputs: ws.iter().map(|w| w.as_slice()).collect(),
            targets: vec![0.7, 0.1, 0.3],
            teacher_outputs: Some(vec![0.6, 0.2, 0.35]),
        };
        let obj = Objective::kd(0.1, 0.01);
        let r = finite_diff_check(&spec, &params, &batch, &obj, 1e-5, None).unwrap();
        assert!(r.max_rel_error < 1e-4 || r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn teacher_shaped_model_gradients_match() {
        // Small dims exercise the time-distributed dense path.
        let spec = build_teacher(TeacherDims::new(4, 3, 5));
        let params = init_params(&spec, 9);
        let ws = windows(2, 0.7);
        let batch = Batch {
            inputs: ws.iter().map(|w| w.as_slice()).collect(),
            targets: vec![0.3, 0.8],
            teacher_outputs: None,
        };
        let obj = Objective::mse(0.001).with_scope(L2Scope::AllWeights);
        let r = finite_diff_check(&spec, &params, &batch, &obj, 1e-5, None).unwrap();
        assert!(r.max_rel_error < 1e-4 || r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
