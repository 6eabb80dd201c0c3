//! Training objectives: mean squared error for boxes, binary cross-entropy for
//! the bleeding probability, and the Focal Tversky loss for masks.
//!
//! Each loss comes in two forms. The `f64` slice functions are the reference
//! definitions and carry closed-form gradients; the `*_t` tensor functions are
//! what the trainer differentiates through candle's autograd.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clip applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Tversky weights and focal exponent.
///
/// `alpha` weights false negatives and `beta` false positives; the loss is
/// `(1 - TI)^gamma` with soft counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalTverskyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for FocalTverskyConfig {
    fn default() -> Self {
        Self { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, epsilon: 1e-6 }
    }
}

impl FocalTverskyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("focal tversky {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { expected: format!("{a} elements"), actual: format!("{b}") });
    }
    Ok(())
}

/// Mean of squared coordinate differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_len(pred.len(), target.len())?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

fn clip(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clipped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(pred: f64, label: f64) -> f64 {
    let p = clip(pred);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Batch mean of [`bce_loss`].
pub fn bce_loss_batch(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| bce_loss(*p, *y)).sum::<f64>() / preds.len() as f64)
}

/// Gradient of [`bce_loss_batch`]; zero where the clip is active.
pub fn bce_grad_batch(preds: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    check_len(preds.len(), labels.len())?;
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else {
                (-(y / p) + (1.0 - y) / (1.0 - p)) / n
            }
        })
        .collect())
}

/// Soft confusion counts `(TP, FN, FP)` for a probability map against a target.
pub fn soft_counts(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fn_ = 0.0;
    let mut fp = 0.0;
    for (&p, &y) in pred.iter().zip(truth) {
        tp += p * y;
        fn_ += (1.0 - p) * y;
        fp += p * (1.0 - y);
    }
    (tp, fn_, fp)
}

/// Tversky index `(TP + ε) / (TP + α·FN + β·FP + ε)`.
pub fn tversky_index(pred: &[f64], truth: &[f64], cfg: &FocalTverskyConfig) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    let (tp, fn_, fp) = soft_counts(pred, truth);
    Ok((tp + cfg.epsilon) / (tp + cfg.alpha * fn_ + cfg.beta * fp + cfg.epsilon))
}

/// `(1 - TI)^γ` for one image, flattened in any order.
pub fn focal_tversky_loss(pred: &[f64], truth: &[f64], cfg: &FocalTverskyConfig) -> Result<f64> {
    let ti = tversky_index(pred, truth, cfg)?;
    Ok((1.0 - ti).max(0.0).powf(cfg.gamma))
}

pub fn focal_tversky_grad(pred: &[f64], truth: &[f64], cfg: &FocalTverskyConfig) -> Result<Vec<f64>> {
    check_len(pred.len(), truth.len())?;
    let (tp, fn_, fp) = soft_counts(pred, truth);
    let num = tp + cfg.epsilon;
    let den = tp + cfg.alpha * fn_ + cfg.beta * fp + cfg.epsilon;
    let ti = num / den;
    let outer = -cfg.gamma * (1.0 - ti).max(0.0).powf(cfg.gamma - 1.0);
    Ok(truth
        .iter()
        .map(|&y| {
            let d_den = y - cfg.alpha * y + cfg.beta * (1.0 - y);
            let d_ti = (y * den - num * d_den) / (den * den);
            outer * d_ti
        })
        .collect())
}

/// Batch MSE over `B×4` box tensors.
pub fn mse_loss_t(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Batch-mean BCE; `pred` and `labels` share a shape.
pub fn bce_loss_t(pred: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(BCE_EPS as f32, (1.0 - BCE_EPS) as f32)?;
    let pos = (labels * p.log()?)?;
    let neg = (labels.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// Per-image Focal Tversky loss on `B×…` probability maps, averaged over the batch.
pub fn focal_tversky_loss_t(pred: &Tensor, truth: &Tensor, cfg: &FocalTverskyConfig) -> Result<Tensor> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", pred.dims()),
            actual: format!("{:?}", truth.dims()),
        });
    }
    let b = pred.dim(0)?;
    let p = pred.reshape((b, ()))?;
    let y = truth.reshape((b, ()))?;
    let tp = (&p * &y)?.sum(1)?;
    let fn_ = (p.affine(-1.0, 1.0)? * &y)?.sum(1)?;
    let fp = (&p * y.affine(-1.0, 1.0)?)?.sum(1)?;
    let eps = cfg.epsilon;
    let num = tp.affine(1.0, eps)?;
    let den = ((&tp + fn_.affine(cfg.alpha, 0.0)?)? + fp.affine(cfg.beta, eps)?)?;
    let ti = (num / den)?;
    let miss = ti.affine(-1.0, 1.0)?.relu()?;
    Ok(miss.powf(cfg.gamma)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::{Device, Var};

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.1, 0.2, 0.4, 0.6], &[0.1, 0.2, 0.4, 0.6]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            mse_loss(&[0.1, 0.2, 0.4, 0.6], &[0.2, 0.2, 0.5, 0.6]).unwrap(),
            0.005,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce_loss(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce_loss(1.0, 1.0) < 1e-6);
        assert_abs_diff_eq!(bce_loss(0.9, 0.0), std::f64::consts::LN_10, epsilon = 1e-9);
    }

    #[test]
    fn ftl_perfect_and_total_miss() {
        let cfg = FocalTverskyConfig::default();
        let truth = [1.0, 0.0, 1.0, 0.0, 0.0];
        assert_abs_diff_eq!(focal_tversky_loss(&truth, &truth, &cfg).unwrap(), 0.0, epsilon = 1e-12);
        let inverse: Vec<f64> = truth.iter().map(|y| 1.0 - y).collect();
        let miss = focal_tversky_loss(&inverse, &truth, &cfg).unwrap();
        let ti = cfg.epsilon / (cfg.alpha * 2.0 + cfg.beta * 3.0 + cfg.epsilon);
        assert_abs_diff_eq!(miss, (1.0 - ti).powf(cfg.gamma), epsilon = 1e-12);
        assert!(miss > 0.999);
    }

    #[test]
    fn ftl_two_by_two_case() {
        // Frozen from a direct evaluation: TP=1.4, FN=0.6, FP=0.3, TI=1.4/1.91.
        let cfg = FocalTverskyConfig::default();
        let pred = [0.8, 0.2, 0.6, 0.1];
        let truth = [1.0, 0.0, 1.0, 0.0];
        let (tp, fn_, fp) = soft_counts(&pred, &truth);
        assert_abs_diff_eq!(tp, 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(fn_, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(fp, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(tversky_index(&pred, &truth, &cfg).unwrap(), 0.7329844, epsilon = 1e-6);
        assert_abs_diff_eq!(focal_tversky_loss(&pred, &truth, &cfg).unwrap(), 0.1719421, epsilon = 1e-6);
    }

    #[test]
    fn ftl_rejects_shape_mismatch() {
        let cfg = FocalTverskyConfig::default();
        assert!(focal_tversky_loss(&[0.5, 0.5], &[1.0], &cfg).is_err());
        let a = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(focal_tversky_loss_t(&a, &b, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FocalTverskyConfig::default().validate().is_ok());
        assert!(FocalTverskyConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn tensor_forms_match_reference_values_and_gradients() {
        let dev = Device::Cpu;
        let cfg = FocalTverskyConfig::default();
        let pred = [0.8f32, 0.2, 0.6, 0.1, 0.3, 0.9, 0.55, 0.05];
        let truth = [1f32, 0., 1., 0., 0., 1., 1., 0.];
        let p = Var::from_vec(pred.to_vec(), (2, 1, 2, 2), &dev).unwrap();
        let y = Tensor::from_vec(truth.to_vec(), (2, 1, 2, 2), &dev).unwrap();
        let loss = focal_tversky_loss_t(&p, &y, &cfg).unwrap();
        let grads = loss.backward().unwrap();
        let got = grads.get(&p).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();

        let p64: Vec<f64> = pred.iter().map(|v| *v as f64).collect();
        let y64: Vec<f64> = truth.iter().map(|v| *v as f64).collect();
        let mut want_loss = 0.0;
        let mut want_grad = Vec::new();
        for i in 0..2 {
            let (ps, ys) = (&p64[i * 4..i * 4 + 4], &y64[i * 4..i * 4 + 4]);
            want_loss += focal_tversky_loss(ps, ys, &cfg).unwrap() / 2.0;
            want_grad.extend(focal_tversky_grad(ps, ys, &cfg).unwrap().into_iter().map(|g| g / 2.0));
        }
        assert_abs_diff_eq!(loss.to_scalar::<f32>().unwrap() as f64, want_loss, epsilon = 1e-5);
        for (g, w) in got.iter().zip(&want_grad) {
            assert_abs_diff_eq!(*g as f64, *w, epsilon = 1e-4);
        }

        let probs = [0.3f32, 0.8, 0.6];
        let labels = [1f32, 0., 1.];
        let pv = Var::from_vec(probs.to_vec(), 3, &dev).unwrap();
        let lt = Tensor::from_vec(labels.to_vec(), 3, &dev).unwrap();
        let bce = bce_loss_t(&pv, &lt).unwrap();
        let g = bce.backward().unwrap().get(&pv).unwrap().to_vec1::<f32>().unwrap();
        let p64: Vec<f64> = probs.iter().map(|v| *v as f64).collect();
        let l64: Vec<f64> = labels.iter().map(|v| *v as f64).collect();
        assert_abs_diff_eq!(
            bce.to_scalar::<f32>().unwrap() as f64,
            bce_loss_batch(&p64, &l64).unwrap(),
            epsilon = 1e-6
        );
        for (a, b) in g.iter().zip(bce_grad_batch(&p64, &l64).unwrap()) {
            assert_abs_diff_eq!(*a as f64, b, epsilon = 1e-4);
        }
    }
}
