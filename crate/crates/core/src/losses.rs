//! Compound BCE + Tversky objective and the consistency penalty.
//!
//! Every loss has a `*_grad` twin returning the value together with the
//! analytic gradient with respect to the prediction.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ProbMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_bce: f64,
    pub w_tversky: f64,
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub smooth_eps: f64,
    pub lambda_consistency: f64,
    pub prob_clip_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_bce: 0.4,
            w_tversky: 0.6,
            alpha: 0.2,
            beta: 0.8,
            smooth_eps: 1e-6,
            lambda_consistency: 0.1,
            prob_clip_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("loss: {msg}")));
        if !(self.w_bce >= 0.0 && self.w_tversky >= 0.0) {
            return bad("weights must be non-negative");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.smooth_eps > 0.0) {
            return bad("smooth_eps must be positive");
        }
        if !(self.prob_clip_eps > 0.0 && self.prob_clip_eps < 0.5) {
            return bad("prob_clip_eps must lie in (0, 0.5)");
        }
        if !(self.lambda_consistency >= 0.0) {
            return bad("lambda_consistency must be non-negative");
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("shape {a:?} does not match {b:?}")));
    }
    Ok(())
}

fn bce_impl(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig, want_grad: bool) -> Result<LossGrad> {
    check_shapes(target.shape(), pred.shape())?;
    let n = target.pixels.len().max(1) as f64;
    let (lo, hi) = (cfg.prob_clip_eps, 1.0 - cfg.prob_clip_eps);
    let mut sum = 0.0;
    let mut grad = if want_grad {
        Array2::zeros(pred.shape())
    } else {
        Array2::zeros((0, 0))
    };
    Zip::from(&target.pixels).and(&pred.pixels).for_each(|&x, &p| {
        let q = p.clamp(lo, hi);
        sum += if x == 1 { q.ln() } else { (1.0 - q).ln() };
    });
    if want_grad {
        Zip::from(&mut grad)
            .and(&target.pixels)
            .and(&pred.pixels)
            .for_each(|g, &x, &p| {
                if p > lo && p < hi {
                    *g = if x == 1 { -1.0 / (n * p) } else { 1.0 / (n * (1.0 - p)) };
                }
            });
    }
    Ok(LossGrad {
        value: -sum / n,
        grad,
    })
}

/// Mean binary cross-entropy with predictions clipped to
/// `[prob_clip_eps, 1 - prob_clip_eps]` before the logarithm.
pub fn bce_loss(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    Ok(bce_impl(target, pred, cfg, false)?.value)
}

pub fn bce_loss_grad(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<LossGrad> {
    bce_impl(target, pred, cfg, true)
}

/// Soft confusion counts: `tp = Σ x p`, `fp = Σ (1-x) p`, `fn = Σ x (1-p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

pub fn soft_counts(target: &BinaryMask, pred: &ProbMap) -> Result<SoftCounts> {
    check_shapes(target.shape(), pred.shape())?;
    let mut c = SoftCounts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    Zip::from(&target.pixels).and(&pred.pixels).for_each(|&x, &p| {
        if x == 1 {
            c.tp += p;
            c.fn_ += 1.0 - p;
        } else {
            c.fp += p;
        }
    });
    Ok(c)
}

/// `(tp + eps) / (tp + alpha fp + beta fn + eps)`.
pub fn tversky_index_from_counts(c: SoftCounts, alpha: f64, beta: f64, smooth_eps: f64) -> f64 {
    (c.tp + smooth_eps) / (c.tp + alpha * c.fp + beta * c.fn_ + smooth_eps)
}

pub fn tversky_index(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    let c = soft_counts(target, pred)?;
    Ok(tversky_index_from_counts(c, cfg.alpha, cfg.beta, cfg.smooth_eps))
}

/// `1 - TI` over soft counts.
pub fn tversky_loss(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - tversky_index(target, pred, cfg)?)
}

pub fn tversky_loss_grad(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<LossGrad> {
    let c = soft_counts(target, pred)?;
    let num = c.tp + cfg.smooth_eps;
    let den = c.tp + cfg.alpha * c.fp + cfg.beta * c.fn_ + cfg.smooth_eps;
    // d(den)/dp is (1 - beta) on foreground pixels and alpha on background.
    let d_fg = -(den - num * (1.0 - cfg.beta)) / (den * den);
    let d_bg = num * cfg.alpha / (den * den);
    let grad = target.pixels.mapv(|x| if x == 1 { d_fg } else { d_bg });
    Ok(LossGrad {
        value: 1.0 - num / den,
        grad,
    })
}

/// `w_bce * BCE + w_tversky * (1 - TI)`.
pub fn compound_loss(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    let bce = bce_loss(target, pred, cfg)?;
    let tv = tversky_loss(target, pred, cfg)?;
    Ok(cfg.w_bce * bce + cfg.w_tversky * tv)
}

pub fn compound_loss_grad(target: &BinaryMask, pred: &ProbMap, cfg: &LossConfig) -> Result<LossGrad> {
    let bce = bce_loss_grad(target, pred, cfg)?;
    let tv = tversky_loss_grad(target, pred, cfg)?;
    let mut grad = bce.grad * cfg.w_bce;
    grad.scaled_add(cfg.w_tversky, &tv.grad);
    Ok(LossGrad {
        value: cfg.w_bce * bce.value + cfg.w_tversky * tv.value,
        grad,
    })
}

/// Mean squared difference between the prediction on a transformed input
/// and the transformed prediction on the original input.
pub fn consistency_loss(pred_of_transformed: &ProbMap, transformed_pred: &ProbMap) -> Result<f64> {
    check_shapes(pred_of_transformed.shape(), transformed_pred.shape())?;
    let n = pred_of_transformed.pixels.len().max(1) as f64;
    let mut sum = 0.0;
    Zip::from(&pred_of_transformed.pixels)
        .and(&transformed_pred.pixels)
        .for_each(|&a, &b| sum += (a - b) * (a - b));
    Ok(sum / n)
}

/// Returns the penalty and the gradients with respect to both arguments.
pub fn consistency_loss_grad(
    pred_of_transformed: &ProbMap,
    transformed_pred: &ProbMap,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let value = consistency_loss(pred_of_transformed, transformed_pred)?;
    let n = pred_of_transformed.pixels.len().max(1) as f64;
    let grad_a = (&pred_of_transformed.pixels - &transformed_pred.pixels) * (2.0 / n);
    let grad_b = -&grad_a;
    Ok((value, grad_a, grad_b))
}
