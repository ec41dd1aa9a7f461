//! Focal loss and cross-entropy over raw logits.
//!
//! Both compute log-probabilities with the row maximum subtracted and work in
//! `f64` internally. The differentiable versions live on
//! [`Graph`](crate::autograd::Graph); the functions here evaluate the same
//! formulas on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_softmax_row, softmax_row};
use crate::tensor::{Element, Tensor};

/// Class weighting for the focal loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha {
    /// The same weight for every class.
    Uniform(f64),
    /// One weight per class.
    PerClass(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: Alpha,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: Alpha::Uniform(1.0) }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("focal gamma must be a finite value >= 0, got {}", self.gamma)));
        }
        let ok = match &self.alpha {
            Alpha::Uniform(a) => *a > 0.0 && a.is_finite(),
            Alpha::PerClass(v) => !v.is_empty() && v.iter().all(|a| *a > 0.0 && a.is_finite()),
        };
        if !ok {
            return Err(Error::config("focal alpha values must be finite and > 0"));
        }
        Ok(())
    }

    /// Per-class weights for `num_classes` classes.
    pub fn alpha_vector(&self, num_classes: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match &self.alpha {
            Alpha::Uniform(a) => Ok(vec![*a; num_classes]),
            Alpha::PerClass(v) if v.len() == num_classes => Ok(v.clone()),
            Alpha::PerClass(v) => Err(Error::config(format!(
                "focal alpha has {} entries but the model has {num_classes} classes",
                v.len()
            ))),
        }
    }

    /// Weights proportional to inverse class frequency, scaled to average 1.
    pub fn inverse_frequency(gamma: f64, class_counts: &[usize]) -> Result<Self> {
        if class_counts.is_empty() || class_counts.contains(&0) {
            return Err(Error::config("inverse-frequency alpha needs a positive count for every class"));
        }
        let inv: Vec<f64> = class_counts.iter().map(|&c| 1.0 / c as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        Ok(Self { gamma, alpha: Alpha::PerClass(inv.into_iter().map(|v| v / mean).collect()) })
    }
}

fn check_targets<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    let [n, k] = logits.dims2("logits")?;
    if targets.is_empty() {
        return Err(Error::contract("loss over an empty batch"));
    }
    if targets.len() != n {
        return Err(Error::contract(format!("{} targets for a batch of {n} logit rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::contract(format!("target class {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// Mean cross-entropy; also returns the softmax probabilities (row-major).
pub(crate) fn cross_entropy_forward<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, k) = check_targets(logits, targets)?;
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(n * k);
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        total -= log_softmax_row(row)[t];
        probs.extend(softmax_row(row));
    }
    Ok((total / n as f64, probs))
}

pub(crate) fn cross_entropy_grad(probs: &[f64], targets: &[usize], upstream: f64) -> Vec<f64> {
    let n = targets.len();
    let k = probs.len() / n;
    let scale = upstream / n as f64;
    let mut d = probs.to_vec();
    for (row, &t) in d.chunks_mut(k).zip(targets) {
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    d
}

/// `1 − p_y` computed as the sum of the other classes' probabilities so it
/// stays accurate when `p_y` is close to 1.
fn complement(row: &[f64], target: usize) -> f64 {
    row.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, p)| p).sum()
}

pub(crate) fn focal_forward<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (n, k) = check_targets(logits, targets)?;
    if alpha.len() != k {
        return Err(Error::config(format!("{} focal alpha weights for {k} classes", alpha.len())));
    }
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(n * k);
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        let p = softmax_row(row);
        let log_p = log_softmax_row(row)[t];
        total -= alpha[t] * complement(&p, t).powf(gamma) * log_p;
        probs.extend(p);
    }
    Ok((total / n as f64, probs))
}

pub(crate) fn focal_grad(probs: &[f64], targets: &[usize], gamma: f64, alpha: &[f64], upstream: f64) -> Vec<f64> {
    let n = targets.len();
    let k = probs.len() / n;
    let scale = upstream / n as f64;
    let mut d = vec![0.0; probs.len()];
    for ((row, out), &t) in probs.chunks(k).zip(d.chunks_mut(k)).zip(targets) {
        let p = row[t];
        let q = complement(row, t);
        // d/dp_y of −α q^γ log p, multiplied by p_y; the second term vanishes
        // as q → 0 for every γ > 0.
        let p_log_p = if p > 0.0 { p * p.ln() } else { 0.0 };
        let second = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p_log_p };
        let factor = -alpha[t] * (q.powf(gamma) - second);
        for (j, (o, &pj)) in out.iter_mut().zip(row).enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *o = factor * (delta - pj) * scale;
        }
    }
    d
}

/// Mean cross-entropy of `logits: [N, K]` against class indices.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    cross_entropy_forward(logits, targets).map(|(l, _)| l)
}

/// Mean focal loss of `logits: [N, K]` against class indices.
pub fn focal_loss<T: Element>(logits: &Tensor<T>, targets: &[usize], config: &FocalLossConfig) -> Result<f64> {
    let alpha = config.alpha_vector(logits.dims2("logits")?[1])?;
    focal_forward(logits, targets, config.gamma, &alpha).map(|(l, _)| l)
}

/// Per-sample losses, for inspecting the focal/cross-entropy ratio.
pub fn per_sample<T: Element>(logits: &Tensor<T>, targets: &[usize], config: Option<&FocalLossConfig>) -> Result<Vec<f64>> {
    let (_, k) = check_targets(logits, targets)?;
    let alpha = match config {
        Some(c) => c.alpha_vector(k)?,
        None => vec![1.0; k],
    };
    let gamma = config.map_or(0.0, |c| c.gamma);
    Ok(logits
        .data()
        .chunks(k)
        .zip(targets)
        .map(|(row, &t)| {
            let q = complement(&softmax_row(row), t);
            -alpha[t] * q.powf(gamma) * log_softmax_row(row)[t]
        })
        .collect())
}
