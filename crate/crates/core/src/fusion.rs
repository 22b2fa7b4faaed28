//! Monotone logistic fusion head.
//!
//! `q = sigmoid(b + sum_j softplus(w_raw[j]) * phi[j])`. The softplus keeps
//! every effective weight strictly positive, so raising any standardized
//! feature can never lower `q`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used inside logarithms of the loss.
pub const PROB_CLIP: f64 = 1e-12;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)`, stable for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParameters {
    pub b: f64,
    pub w_raw: Vec<f64>,
}

impl FusionParameters {
    /// `b = 0`, `w_raw = 0`: every effective weight starts at `ln 2`.
    pub fn zeros(dim: usize) -> Self {
        FusionParameters {
            b: 0.0,
            w_raw: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_raw.len()
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        self.w_raw.iter().map(|&w| softplus(w)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() || self.w_raw.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("fusion parameters must be finite".into()));
        }
        Ok(())
    }

    /// Same weights with `b` moved by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        FusionParameters {
            b: self.b + delta,
            w_raw: self.w_raw.clone(),
        }
    }
}

pub fn head_logit(phi_std: &[f64], params: &FusionParameters) -> f64 {
    debug_assert_eq!(phi_std.len(), params.dim());
    params.b
        + params
            .w_raw
            .iter()
            .zip(phi_std)
            .map(|(&w, &x)| softplus(w) * x)
            .sum::<f64>()
}

pub fn predict_prob(phi_std: &[f64], params: &FusionParameters) -> f64 {
    sigmoid(head_logit(phi_std, params))
}

/// Standardized feature rows with binary correctness labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledRows {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl LabeledRows {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Usage("feature rows have inconsistent dimension".into()));
            }
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Usage("feature rows must be finite".into()));
        }
        Ok(LabeledRows { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(Vec::len)
    }

    /// Rows in a total order that depends only on their contents, so
    /// sums over them do not depend on input order.
    fn canonical(&self) -> LabeledRows {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.features[a]
                .iter()
                .zip(&self.features[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
                .then(self.labels[a].cmp(&self.labels[b]))
        });
        LabeledRows {
            features: order.iter().map(|&i| self.features[i].clone()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradient {
    /// Mean NLL plus `0.5 * weight_decay * |w_raw|^2`.
    pub loss: f64,
    pub grad_b: f64,
    pub grad_w_raw: Vec<f64>,
}

/// Negative log-likelihood of one label under logit `t`, with the
/// probability clipped at [`PROB_CLIP`].
pub fn binary_nll(t: f64, y: bool) -> f64 {
    let log_floor = PROB_CLIP.ln();
    if y {
        -log_sigmoid(t).max(log_floor)
    } else {
        -log_sigmoid(-t).max(log_floor)
    }
}

/// Mean negative log-likelihood.
pub fn nll(params: &FusionParameters, rows: &LabeledRows) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Fit {
            stage: "nll",
            message: "no rows".into(),
        });
    }
    let weights = params.effective_weights();
    let total: f64 = rows
        .features
        .iter()
        .zip(&rows.labels)
        .map(|(x, &y)| binary_nll(params.b + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(), y))
        .sum();
    Ok(total / rows.len() as f64)
}

/// Regularized NLL and its analytic gradient with respect to `b` and the
/// raw weights. The bias is not decayed.
pub fn nll_and_gradient(params: &FusionParameters, rows: &LabeledRows, weight_decay: f64) -> Result<LossAndGradient> {
    if rows.is_empty() {
        return Err(Error::Fit {
            stage: "nll",
            message: "no rows".into(),
        });
    }
    let dim = params.dim();
    if rows.dim() != Some(dim) {
        return Err(Error::Usage(format!(
            "rows have dimension {:?}, parameters {dim}",
            rows.dim()
        )));
    }
    let weights = params.effective_weights();
    let mut loss = 0.0;
    let mut grad_b = 0.0;
    let mut grad_w = vec![0.0; dim];
    for (x, &y) in rows.features.iter().zip(&rows.labels) {
        let t = params.b + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        loss += binary_nll(t, y);
        let residual = sigmoid(t) - if y { 1.0 } else { 0.0 };
        grad_b += residual;
        for (g, v) in grad_w.iter_mut().zip(x) {
            *g += residual * v;
        }
    }
    let n = rows.len() as f64;
    let penalty = 0.5 * weight_decay * params.w_raw.iter().map(|w| w * w).sum::<f64>();
    // d softplus(w) / dw = sigmoid(w)
    let grad_w_raw = grad_w
        .iter()
        .zip(&params.w_raw)
        .map(|(g, &w)| g / n * sigmoid(w) + weight_decay * w)
        .collect();
    Ok(LossAndGradient {
        loss: loss / n + penalty,
        grad_b: grad_b / n,
        grad_w_raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// L2 penalty on the raw weights.
    pub weight_decay: f64,
    /// Iterations without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Kept for provenance; full-batch fitting draws no random numbers.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.05,
            max_iters: 2000,
            weight_decay: 1e-4,
            patience: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_iters == 0 || self.patience == 0 {
            return Err(Error::Config("max_iters and patience must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("invalid adaptive-moment parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub params: FusionParameters,
    /// Update count at which `params` were taken (0 = initialization).
    pub best_iteration: usize,
    /// Monitored loss at `best_iteration`: validation NLL when a
    /// validation set was given, else the regularized training loss.
    pub best_monitor: f64,
    pub iterations_run: usize,
    pub train_loss: Vec<f64>,
}

/// Full-batch adaptive-moment fit of the head.
///
/// With `validation` the returned parameters are those with the lowest
/// validation NLL, and fitting stops after `patience` iterations without
/// improvement. Row order does not affect the result.
pub fn fit_head(train: &LabeledRows, validation: Option<&LabeledRows>, config: &FitConfig) -> Result<HeadFit> {
    config.validate()?;
    let dim = train.dim().ok_or_else(|| Error::Fit {
        stage: "fit_head",
        message: "calibration split is empty".into(),
    })?;
    if let Some(val) = validation {
        if val.is_empty() {
            return Err(Error::Fit {
                stage: "fit_head",
                message: "validation split is empty".into(),
            });
        }
        if val.dim() != Some(dim) {
            return Err(Error::Usage("validation rows have a different dimension".into()));
        }
    }
    let train = train.canonical();
    let validation = validation.map(LabeledRows::canonical);

    let mut params = FusionParameters::zeros(dim);
    let n_params = dim + 1;
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];

    let monitor = |p: &FusionParameters, train_loss: f64| -> Result<f64> {
        match &validation {
            Some(val) => nll(p, val),
            None => Ok(train_loss),
        }
    };

    let first = nll_and_gradient(&params, &train, config.weight_decay)?;
    if !first.loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut current = first;
    let mut best = (params.clone(), 0usize, monitor(&params, current.loss)?);
    let mut train_loss = vec![current.loss];
    let mut since_best = 0usize;
    let mut iterations_run = 0usize;

    for iter in 1..=config.max_iters {
        let grads = std::iter::once(current.grad_b).chain(current.grad_w_raw.iter().copied());
        let bc1 = 1.0 - config.beta1.powi(iter as i32);
        let bc2 = 1.0 - config.beta2.powi(iter as i32);
        for (idx, g) in grads.enumerate() {
            m[idx] = config.beta1 * m[idx] + (1.0 - config.beta1) * g;
            v[idx] = config.beta2 * v[idx] + (1.0 - config.beta2) * g * g;
            let step = config.learning_rate * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + config.adam_epsilon);
            if idx == 0 {
                params.b -= step;
            } else {
                params.w_raw[idx - 1] -= step;
            }
        }
        iterations_run = iter;

        current = nll_and_gradient(&params, &train, config.weight_decay)?;
        if !current.loss.is_finite() || params.validate().is_err() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        train_loss.push(current.loss);
        let score = monitor(&params, current.loss)?;
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        if score < best.2 {
            best = (params.clone(), iter, score);
            since_best = 0;
        } else {
            since_best += 1;
            if validation.is_some() && since_best >= config.patience {
                break;
            }
        }
    }

    let (params, best_iteration, best_monitor) = best;
    Ok(HeadFit {
        params,
        best_iteration,
        best_monitor,
        iterations_run,
        train_loss,
    })
}
