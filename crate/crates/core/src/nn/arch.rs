//! Teacher and student architectures and their size arithmetic.

use serde::{Deserialize, Serialize};

use super::{Activation, LayerSpec, ModelSpec};

/// Timesteps per input window.
pub const WINDOW_LENGTH: usize = 15;

/// Student hidden sizes (first LSTM, second LSTM, hidden dense).
///
/// These are the unique sizes giving 871 parameters together with
/// intermediate outputs of 5 (after both LSTMs) and 150 (after the first).
pub const STUDENT_HIDDEN: (usize, usize, usize) = (10, 5, 10);

/// Bytes per stored parameter in the deployment form (32-bit reals).
const BYTES_PER_PARAM: f64 = 4.0;

/// LSTM(1→10, seq) → LSTM(10→5) → Dense(5→10, relu) → Dense(10→1).
pub fn build_student() -> ModelSpec {
    let (h1, h2, d) = STUDENT_HIDDEN;
    ModelSpec::new(
        vec![
            LayerSpec::lstm(1, h1, true),
            LayerSpec::lstm(h1, h2, false),
            LayerSpec::dense(h2, d, Activation::Relu),
            LayerSpec::dense(d, 1, Activation::Linear),
        ],
        WINDOW_LENGTH,
    )
    .expect("student architecture is shape-consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TeacherDims {
    pub h1: usize,
    pub d: usize,
    pub h2: usize,
}

impl TeacherDims {
    pub fn new(h1: usize, d: usize, h2: usize) -> Self {
        TeacherDims { h1, d, h2 }
    }
}

/// LSTM(1→h1, seq) → time-distributed Dense(h1→d, relu) → LSTM(d→h2) → Dense(h2→1).
///
/// # Panics
/// If any dimension is zero.
pub fn build_teacher(dims: TeacherDims) -> ModelSpec {
    let TeacherDims { h1, d, h2 } = dims;
    assert!(h1 >= 1 && d >= 1 && h2 >= 1, "teacher dims must be positive");
    ModelSpec::new(
        vec![
            LayerSpec::lstm(1, h1, true),
            LayerSpec::time_distributed(h1, d, Activation::Relu),
            LayerSpec::lstm(d, h2, false),
            LayerSpec::dense(h2, 1, Activation::Linear),
        ],
        WINDOW_LENGTH,
    )
    .expect("teacher architecture is shape-consistent")
}

/// Closed-form teacher parameter count, without building the spec.
pub fn teacher_param_count(dims: TeacherDims) -> usize {
    let TeacherDims { h1, d, h2 } = dims;
    4 * (h1 * (1 + h1) + h1) + (h1 * d + d) + 4 * (h2 * (d + h2) + h2) + (h2 + 1)
}

pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_count()
}

/// Storage size in KB at 32 bits per parameter, rounded to two decimals.
pub fn model_size_kb(count: usize) -> f64 {
    let kb = count as f64 * BYTES_PER_PARAM / 1024.0;
    (kb * 100.0).round() / 100.0
}

/// All `(h1, d, h2)` in `1..=h_max` whose teacher has exactly `target`
/// parameters, ordered by `(|d - h1|, h1, d, h2)`. The first entry is the
/// canonical teacher.
pub fn search_teacher_dims(target: usize, h_max: usize) -> Vec<TeacherDims> {
    let mut hits = Vec::new();
    for h1 in 1..=h_max {
        for d in 1..=h_max {
            for h2 in 1..=h_max {
                let dims = TeacherDims { h1, d, h2 };
                if teacher_param_count(dims) == target {
                    hits.push(dims);
                }
            }
        }
    }
    hits.sort_by_key(|t| (t.d.abs_diff(t.h1), t.h1, t.d, t.h2));
    hits
}

/// Fallback when no exact match exists: the triple minimizing
/// `|count - target|`, ties broken as in [`search_teacher_dims`].
pub fn closest_teacher_dims(target: usize, h_max: usize) -> Option<TeacherDims> {
    type Key = (usize, usize, usize, usize, usize);
    let mut best: Option<(Key, TeacherDims)> = None;
    for h1 in 1..=h_max {
        for d in 1..=h_max {
            for h2 in 1..=h_max {
                let dims = TeacherDims { h1, d, h2 };
                let key = (
                    teacher_param_count(dims).abs_diff(target),
                    d.abs_diff(h1),
                    h1,
                    d,
                    h2,
                );
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, dims));
                }
            }
        }
    }
    best.map(|(_, dims)| dims)
}

/// Canonical teacher for a target count: first exact match, else the closest.
pub fn canonical_teacher_dims(target: usize, h_max: usize) -> Option<TeacherDims> {
    search_teacher_dims(target, h_max)
        .first()
        .copied()
        .or_else(|| closest_teacher_dims(target, h_max))
}
