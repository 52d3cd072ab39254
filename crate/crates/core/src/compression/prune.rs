use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Kernel entries considered (biases excluded).
    pub total: usize,
    pub zeroed: usize,
    pub sparsity: f64,
    /// Largest magnitude that was zeroed; 0 when nothing was.
    pub threshold: f64,
}

/// Number of weights zeroed for `target` sparsity over `total` weights.
pub fn prune_count(total: usize, target: f64) -> usize {
    ((target * total as f64).round_ties_even() as usize).min(total)
}

/// Zeroes the `round(target · n)` smallest-magnitude kernel entries across
/// the whole model. Ties go to the earlier entry in serialization order
/// (layer, then `W` before `U`, then flat index).
pub fn prune_global_magnitude<T: Real>(params: &Parameters<T>, target: f64) -> Result<(Parameters<T>, PruneReport)> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target sparsity {target} outside [0, 1)")));
    }
    // (magnitude, array index, element index); enumeration order is the tie-break.
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (a, (role, arr)) in params.arrays().enumerate() {
        if role.is_weight() {
            entries.extend(arr.iter().enumerate().map(|(i, v)| (Real::to_f64(*v).abs(), a, i)));
        }
    }
    let total = entries.len();
    let k = prune_count(total, target);
    entries.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out = params.clone();
    let mut arrays: Vec<&mut Vec<T>> = out.arrays_mut().map(|(_, a)| a).collect();
    for &(_, a, i) in &entries[..k] {
        arrays[a][i] = T::zero();
    }
    let threshold = if k == 0 { 0.0 } else { entries[k - 1].0 };
    Ok((
        out,
        PruneReport {
            total,
            zeroed: k,
            sparsity: if total == 0 { 0.0 } else { k as f64 / total as f64 },
            threshold,
        },
    ))
}

/// Fraction of kernel entries equal to zero.
pub fn weight_sparsity<T: Real>(params: &Parameters<T>) -> f64 {
    let (mut zeros, mut n) = (0usize, 0usize);
    for (role, arr) in params.arrays() {
        if role.is_weight() {
            n += arr.len();
            zeros += arr.iter().filter(|v| v.is_zero()).count();
        }
    }
    if n == 0 {
        0.0
    } else {
        zeros as f64 / n as f64
    }
}
