//! Exact gradients by backpropagation through time.
//!
//! The objective for a batch of `B` windows is
//! `data_loss + l2_lambda · Σ w²`, where `data_loss` is the batch MSE or the
//! distillation loss and the penalty covers the kernels selected by
//! [`L2Scope`] (biases are never penalized).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::forward::{dense_apply, lstm_step};
use crate::nn::params::GATES;
use crate::nn::{
    model_forward, Activation, ArrayRole, DenseWeights, LayerParams, LayerSpec, LstmWeights, ModelSpec,
    Parameters,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Mse,
    Kd,
}

/// Which kernels the L2 penalty covers. Biases are never penalized.
///
/// The narrower scopes keep the LSTM kernels free of shrinkage. That helps
/// a large model fit, but it leaves the dense head with the smallest weights
/// in the network, and global magnitude pruning then removes the head
/// entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// LSTM input and recurrent kernels and dense kernels.
    #[default]
    AllWeights,
    /// Dense-layer kernels only.
    DenseKernels,
    /// LSTM input kernels and dense kernels; recurrent kernels are free.
    Kernels,
}

impl L2Scope {
    pub fn covers(self, role: ArrayRole) -> bool {
        match self {
            L2Scope::AllWeights => role.is_weight(),
            L2Scope::DenseKernels => role == ArrayRole::DenseKernel,
            L2Scope::Kernels => matches!(role, ArrayRole::InputKernel | ArrayRole::DenseKernel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub loss: LossKind,
    /// Weight of the true-label term in the distillation loss; ignored for MSE.
    pub alpha: f64,
    pub l2_lambda: f64,
    pub l2_scope: L2Scope,
}

impl Objective {
    pub fn mse(l2_lambda: f64) -> Self {
        Objective {
            loss: LossKind::Mse,
            alpha: 1.0,
            l2_lambda,
            l2_scope: L2Scope::default(),
        }
    }

    pub fn kd(alpha: f64, l2_lambda: f64) -> Self {
        Objective {
            loss: LossKind::Kd,
            alpha,
            l2_lambda,
            l2_scope: L2Scope::default(),
        }
    }

    pub fn with_scope(mut self, scope: L2Scope) -> Self {
        self.l2_scope = scope;
        self
    }

    /// `λ · Σ w²` over the covered arrays.
    pub fn penalty(&self, params: &Parameters<f64>) -> f64 {
        if self.l2_lambda == 0.0 {
            return 0.0;
        }
        let sum: f64 = params
            .arrays()
            .filter(|(role, _)| self.l2_scope.covers(*role))
            .map(|(_, a)| a.iter().map(|w| w * w).sum::<f64>())
            .sum();
        self.l2_lambda * sum
    }

    /// Derivative of the batch data loss with respect to one prediction.
    fn prediction_grad(&self, pred: f64, target: f64, teacher: Option<f64>, batch: usize) -> f64 {
        let scale = 2.0 / batch as f64;
        match (self.loss, teacher) {
            (LossKind::Kd, Some(w)) => scale * (self.alpha * (pred - target) + (1.0 - self.alpha) * (pred - w)),
            _ => scale * (pred - target),
        }
    }

    /// Batch data loss from predictions.
    pub fn data_loss(&self, preds: &[f64], targets: &[f64], teacher: Option<&[f64]>) -> Result<f64> {
        match (self.loss, teacher) {
            (LossKind::Mse, None) => super::mse(targets, preds),
            (LossKind::Kd, Some(w)) => super::kd_loss(targets, preds, w, self.alpha),
            (LossKind::Mse, Some(_)) => Err(Error::InvalidArgument("teacher outputs given for an MSE objective".into())),
            (LossKind::Kd, None) => Err(Error::InvalidArgument("distillation requires teacher outputs".into())),
        }
    }
}

/// A minibatch of windows with targets and, for distillation, the frozen
/// teacher's predictions.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub targets: Vec<f64>,
    pub teacher_outputs: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub data_loss: f64,
    pub penalty: f64,
    pub grads: Parameters<f64>,
}

enum LayerCache {
    Lstm {
        steps: usize,
        /// `[steps × in]`
        xs: Vec<f64>,
        /// `[(steps + 1) × h]`, row 0 is the zero initial state.
        hs: Vec<f64>,
        cs: Vec<f64>,
        /// `[steps × 4h]` post-activation gates.
        gates: Vec<f64>,
    },
    Dense {
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

fn lstm_forward_cached(w: &LstmWeights<f64>, seq: &[f64], steps: usize, return_sequences: bool) -> (Vec<f64>, LayerCache) {
    let h = w.hidden_size;
    let n_in = w.input_size;
    let mut hs = vec![0.0; (steps + 1) * h];
    let mut cs = vec![0.0; (steps + 1) * h];
    let mut gates = vec![0.0; steps * GATES * h];
    for t in 0..steps {
        let (hp, hn) = hs.split_at_mut((t + 1) * h);
        let (cp, cn) = cs.split_at_mut((t + 1) * h);
        lstm_step(
            w,
            &seq[t * n_in..(t + 1) * n_in],
            &hp[t * h..],
            &cp[t * h..],
            &mut gates[t * GATES * h..(t + 1) * GATES * h],
            &mut cn[..h],
            &mut hn[..h],
        );
    }
    let out = if return_sequences {
        hs[h..].to_vec()
    } else {
        hs[steps * h..].to_vec()
    };
    let cache = LayerCache::Lstm {
        steps,
        xs: seq.to_vec(),
        hs,
        cs,
        gates,
    };
    (out, cache)
}

/// BPTT for one LSTM layer. `d_out` is `[steps × h]` or `[h]` (last step
/// only). Accumulates into `g` and returns `d_input` when requested.
fn lstm_backward(
    w: &LstmWeights<f64>,
    cache: &LayerCache,
    d_out: &[f64],
    return_sequences: bool,
    g: &mut LstmWeights<f64>,
    need_input_grad: bool,
) -> Vec<f64> {
    let LayerCache::Lstm { steps, xs, hs, cs, gates } = cache else {
        unreachable!("LSTM layer with a dense cache");
    };
    let steps = *steps;
    let h = w.hidden_size;
    let n_in = w.input_size;
    let mut dx = if need_input_grad { vec![0.0; steps * n_in] } else { Vec::new() };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; GATES * h];
    for t in (0..steps).rev() {
        let gt = &gates[t * GATES * h..(t + 1) * GATES * h];
        let c_prev = &cs[t * h..(t + 1) * h];
        let c = &cs[(t + 1) * h..(t + 2) * h];
        let h_prev = &hs[t * h..(t + 1) * h];
        let x = &xs[t * n_in..(t + 1) * n_in];
        for j in 0..h {
            let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
            let mut dh = dh_next[j];
            if return_sequences {
                dh += d_out[t * h + j];
            } else if t == steps - 1 {
                dh += d_out[j];
            }
            let tc = c[j].tanh();
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * gg * i * (1.0 - i);
            da[h + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h + j] = dc * i * (1.0 - gg * gg);
            da[3 * h + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.fill(0.0);
        for (r, &a) in da.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            g.b[r] += a;
            let gw = &mut g.w[r * n_in..(r + 1) * n_in];
            for (gv, xv) in gw.iter_mut().zip(x) {
                *gv += a * xv;
            }
            let gu = &mut g.u[r * h..(r + 1) * h];
            for (gv, hv) in gu.iter_mut().zip(h_prev) {
                *gv += a * hv;
            }
            let urow = &w.u[r * h..(r + 1) * h];
            for (d, uv) in dh_next.iter_mut().zip(urow) {
                *d += a * uv;
            }
            if need_input_grad {
                let wrow = &w.w[r * n_in..(r + 1) * n_in];
                for (d, wv) in dx[t * n_in..(t + 1) * n_in].iter_mut().zip(wrow) {
                    *d += a * wv;
                }
            }
        }
    }
    dx
}

fn dense_backward(
    d: &DenseWeights<f64>,
    act: Activation,
    cache: &LayerCache,
    d_out: &[f64],
    g: &mut DenseWeights<f64>,
    need_input_grad: bool,
) -> Vec<f64> {
    let LayerCache::Dense { x, y } = cache else {
        unreachable!("dense layer with an LSTM cache");
    };
    let (n_in, n_out) = (d.input_size, d.output_size);
    let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    for (s, xs) in x.chunks_exact(n_in).enumerate() {
        for r in 0..n_out {
            let mut dz = d_out[s * n_out + r];
            if act == Activation::Relu && y[s * n_out + r] <= 0.0 {
                dz = 0.0;
            }
            if dz == 0.0 {
                continue;
            }
            g.b[r] += dz;
            for (gv, xv) in g.w[r * n_in..(r + 1) * n_in].iter_mut().zip(xs) {
                *gv += dz * xv;
            }
            if need_input_grad {
                for (dv, wv) in dx[s * n_in..(s + 1) * n_in].iter_mut().zip(&d.w[r * n_in..(r + 1) * n_in]) {
                    *dv += dz * wv;
                }
            }
        }
    }
    dx
}

/// Forward pass that keeps what the backward pass needs. Returns the scalar
/// prediction and one cache per layer.
fn forward_cached(spec: &ModelSpec, params: &Parameters<f64>, window: &[f64]) -> Result<(f64, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut cur = window.to_vec();
    let mut steps = spec.window_length;
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        match (layer, p) {
            (LayerSpec::Lstm { return_sequences, .. }, LayerParams::Lstm(w)) => {
                let (out, cache) = lstm_forward_cached(w, &cur, steps, *return_sequences);
                if !return_sequences {
                    steps = 1;
                }
                caches.push(cache);
                cur = out;
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(d)) => {
                let rows = cur.len() / d.input_size;
                let mut out = vec![0.0; rows * d.output_size];
                for (xs, os) in cur.chunks_exact(d.input_size).zip(out.chunks_exact_mut(d.output_size)) {
                    dense_apply(d, *activation, xs, os);
                }
                caches.push(LayerCache::Dense { x: cur, y: out.clone() });
                cur = out;
            }
            _ => return shape_err(format!("parameters do not match layer {layer:?}")),
        }
    }
    if cur.len() != 1 {
        return shape_err("model does not end in a scalar");
    }
    Ok((cur[0], caches))
}

fn backward_sample(
    spec: &ModelSpec,
    params: &Parameters<f64>,
    caches: &[LayerCache],
    d_pred: f64,
    grads: &mut Parameters<f64>,
) {
    let mut d = vec![d_pred];
    for k in (0..spec.layers.len()).rev() {
        let need = k > 0;
        d = match (&spec.layers[k], &params.layers[k], &mut grads.layers[k]) {
            (LayerSpec::Lstm { return_sequences, .. }, LayerParams::Lstm(w), LayerParams::Lstm(g)) => {
                lstm_backward(w, &caches[k], &d, *return_sequences, g, need)
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(w), LayerParams::Dense(g)) => {
                dense_backward(w, *activation, &caches[k], &d, g, need)
            }
            _ => unreachable!("parameters checked against spec"),
        };
    }
}

/// Gradient of the batch objective with respect to every parameter.
pub fn backward(spec: &ModelSpec, params: &Parameters<f64>, batch: &Batch<'_>, objective: &Objective) -> Result<Gradients> {
    params.check_against(spec)?;
    let b = batch.inputs.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.targets.len() != b {
        return shape_err("batch inputs and targets differ in length");
    }
    match (objective.loss, &batch.teacher_outputs) {
        (LossKind::Kd, Some(w)) if w.len() == b => {}
        (LossKind::Kd, _) => return Err(Error::InvalidArgument("distillation requires one teacher output per window".into())),
        (LossKind::Mse, Some(_)) => return Err(Error::InvalidArgument("teacher outputs given for an MSE objective".into())),
        (LossKind::Mse, None) => {}
    }
    let expected = spec.window_length * spec.feature_count;
    let mut grads = Parameters::<f64>::zeros(spec);
    let mut preds = Vec::with_capacity(b);
    for (i, x) in batch.inputs.iter().enumerate() {
        if x.len() != expected {
            return shape_err(format!("window {i} has {} values, expected {expected}", x.len()));
        }
        let (pred, caches) = forward_cached(spec, params, x)?;
        let teacher = batch.teacher_outputs.as_ref().map(|w| w[i]);
        let d_pred = objective.prediction_grad(pred, batch.targets[i], teacher, b);
        backward_sample(spec, params, &caches, d_pred, &mut grads);
        preds.push(pred);
    }
    if objective.l2_lambda != 0.0 {
        let scope = objective.l2_scope;
        let two_lambda = 2.0 * objective.l2_lambda;
        for ((role, g), (_, w)) in grads.arrays_mut().zip(params.arrays()) {
            if scope.covers(role) {
                for (gv, wv) in g.iter_mut().zip(w) {
                    *gv += two_lambda * wv;
                }
            }
        }
    }
    let data_loss = objective.data_loss(&preds, &batch.targets, batch.teacher_outputs.as_deref())?;
    Ok(Gradients {
        data_loss,
        penalty: objective.penalty(params),
        grads,
    })
}

/// Objective value on a batch via the plain inference path.
pub fn objective_value(spec: &ModelSpec, params: &Parameters<f64>, batch: &Batch<'_>, objective: &Objective) -> Result<f64> {
    let preds = batch
        .inputs
        .iter()
        .map(|x| model_forward(spec, params, x).map(|f| f.prediction))
        .collect::<Result<Vec<_>>>()?;
    Ok(objective.data_loss(&preds, &batch.targets, batch.teacher_outputs.as_deref())? + objective.penalty(params))
}
