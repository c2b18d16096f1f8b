//! Detection losses over labeled feature grids.
//!
//! Classification mixes focal loss on negatives with Gaussian-weighted
//! cross entropy on positives; localization is smooth L1 on the offset
//! channels of positive slots. Both are normalized by the positive count
//! across all levels (with a floor of one), and ignored slots contribute
//! nothing to either value or gradient.

use serde::{Deserialize, Serialize};

use crate::assignment::{Label, LabelGrid};
use crate::error::{Error, Result};
use crate::network::Tensor5;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_focal: f64,
    pub gamma: f64,
    pub smooth_l1_beta: f64,
    pub n_pos_floor: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_focal: 0.25,
            gamma: 2.0,
            smooth_l1_beta: 1.0,
            n_pos_floor: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_focal) {
            return Err(Error::Config("alpha_focal must be in [0, 1]".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        if !self.smooth_l1_beta.is_finite() || self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        if self.n_pos_floor == 0 {
            return Err(Error::Config("n_pos_floor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal term for one probability (value, gradient with respect to the
/// underlying logit). `y` marks the ground-truth class.
pub fn focal_term<T: Real>(p: T, y: bool, cfg: &LossConfig) -> Result<(T, T)> {
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "focal_term needs a probability strictly inside (0, 1), got {p}"
        )));
    }
    let alpha = T::cast(cfg.alpha_focal);
    let gamma = T::cast(cfg.gamma);
    let (p_t, alpha_t) = if y { (p, alpha) } else { (T::one() - p, T::one() - alpha) };
    let q = T::one() - p_t;
    let s = -p_t.ln();
    let value = alpha_t * q.powf(gamma) * s;
    let d_dz = -alpha_t * q.powf(gamma) * (gamma * p_t * s + q);
    let grad = if y { d_dz } else { -d_dz };
    Ok((value, grad))
}

/// Elementwise smooth L1 on a 4-vector of offset residuals; returns the
/// summed value and the per-component gradient with respect to `pred`.
pub fn smooth_l1<T: Real>(pred: &[T; 4], target: &[T; 4], beta: T) -> (T, [T; 4]) {
    let mut value = T::zero();
    let mut grad = [T::zero(); 4];
    let half = T::cast(0.5);
    for i in 0..4 {
        let x = pred[i] - target[i];
        if x.abs() < beta {
            value += half * x * x / beta;
            grad[i] = x / beta;
        } else {
            value += x.abs() - half * beta;
            grad[i] = if x > T::zero() { T::one() } else { -T::one() };
        }
    }
    (value, grad)
}

fn check_shapes<T: Real>(preds: &[Tensor5<T>], labels: &LabelGrid) -> Result<()> {
    if preds.len() != labels.levels.len() {
        return Err(Error::Shape(format!(
            "{} prediction tensors for {} label levels",
            preds.len(),
            labels.levels.len()
        )));
    }
    for (pred, level) in preds.iter().zip(&labels.levels) {
        let d = level.spec.dims;
        let want = [1, 5 * labels.k, d[0], d[1], d[2]];
        if pred.shape != want {
            return Err(Error::Shape(format!(
                "level {} prediction shape {:?} does not match labels {:?}",
                level.spec.level, pred.shape, want
            )));
        }
    }
    Ok(())
}

fn effective_n_pos(labels: &LabelGrid, cfg: &LossConfig) -> usize {
    labels.n_positive().max(cfg.n_pos_floor)
}

/// Classification loss and its gradient tensors (nonzero only on score
/// channels).
pub fn classification_loss<T: Real>(
    preds: &[Tensor5<T>],
    labels: &LabelGrid,
    cfg: &LossConfig,
) -> Result<(T, Vec<Tensor5<T>>)> {
    cfg.validate()?;
    check_shapes(preds, labels)?;
    let inv_n = T::one() / T::cast(effective_n_pos(labels, cfg) as f64);
    let alpha_neg = T::cast(1.0 - cfg.alpha_focal);
    let gamma = T::cast(cfg.gamma);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, level) in preds.iter().zip(&labels.levels) {
        let mut grad = Tensor5::zeros(pred.shape);
        let n_cells = level.spec.n_cells();
        let plane = pred.plane_len();
        for a in 0..labels.k {
            let ch = 5 * a;
            for flat in 0..n_cells {
                let slot = a * n_cells + flat;
                let x = pred.data[ch * plane + flat];
                match level.labels[slot] {
                    Label::Ignored => {}
                    Label::Positive => {
                        let psi = T::cast(level.psi[slot]);
                        value += psi * softplus(-x) * inv_n;
                        grad.data[ch * plane + flat] = psi * (sigmoid(x) - T::one()) * inv_n;
                    }
                    Label::Negative => {
                        let p_t = sigmoid(-x);
                        let q = sigmoid(x);
                        let s = softplus(x);
                        let qg = q.powf(gamma);
                        value += alpha_neg * qg * s * inv_n;
                        grad.data[ch * plane + flat] =
                            alpha_neg * qg * (gamma * p_t * s + q) * inv_n;
                    }
                }
            }
        }
        grads.push(grad);
    }
    Ok((value, grads))
}

/// Localization loss and its gradient tensors (nonzero only on offset
/// channels of positive slots).
pub fn localization_loss<T: Real>(
    preds: &[Tensor5<T>],
    labels: &LabelGrid,
    cfg: &LossConfig,
) -> Result<(T, Vec<Tensor5<T>>)> {
    cfg.validate()?;
    check_shapes(preds, labels)?;
    let inv_n = T::one() / T::cast(effective_n_pos(labels, cfg) as f64);
    let beta = T::cast(cfg.smooth_l1_beta);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, level) in preds.iter().zip(&labels.levels) {
        let mut grad = Tensor5::zeros(pred.shape);
        let n_cells = level.spec.n_cells();
        let plane = pred.plane_len();
        for a in 0..labels.k {
            for flat in 0..n_cells {
                let slot = a * n_cells + flat;
                if level.labels[slot] != Label::Positive {
                    continue;
                }
                let mut p4 = [T::zero(); 4];
                let mut t4 = [T::zero(); 4];
                for i in 0..4 {
                    p4[i] = pred.data[(5 * a + 1 + i) * plane + flat];
                    t4[i] = T::cast(level.offsets[slot][i]);
                }
                let (v, g4) = smooth_l1(&p4, &t4, beta);
                value += v * inv_n;
                for i in 0..4 {
                    grad.data[(5 * a + 1 + i) * plane + flat] = g4[i] * inv_n;
                }
            }
        }
        grads.push(grad);
    }
    Ok((value, grads))
}

pub fn total_loss(l_cls: f64, l_loc: f64, labels: &LabelGrid) -> LossBreakdown {
    LossBreakdown {
        l_cls,
        l_loc,
        l_total: l_cls + l_loc,
        n_pos: labels.n_positive(),
        n_neg: labels.n_negative(),
    }
}

/// Combined loss with summed gradient tensors, one per level.
pub fn detection_loss<T: Real>(
    preds: &[Tensor5<T>],
    labels: &LabelGrid,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor5<T>>)> {
    let (l_cls, mut grads) = classification_loss(preds, labels, cfg)?;
    let (l_loc, loc_grads) = localization_loss(preds, labels, cfg)?;
    for (g, lg) in grads.iter_mut().zip(&loc_grads) {
        g.add_assign(lg)?;
    }
    Ok((
        total_loss(l_cls.as_f64(), l_loc.as_f64(), labels),
        grads,
    ))
}
