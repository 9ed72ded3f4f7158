//! Losses and gating masks of GCT.
//!
//! Shapes: predictions are `[B, H, W, O]`, flaw maps and masks `[B, H, W]`.
//! Every loss sums over pixels (with the ½ factor where the objective has one)
//! and then averages over the batch dimension, returning a scalar tensor.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{GctError, Result};

/// A `[B, H, W]` map of per-pixel flaw probabilities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FlawMap(Tensor);

impl FlawMap {
    /// Wraps a `[B, H, W]` tensor, checking the value range.
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        let lo = t.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = t.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(GctError::input(format!("flaw map values must lie in [0, 1], got [{lo}, {hi}]")));
        }
        Ok(Self(t))
    }

    /// Per-sample min-max normalisation of raw detector outputs; constant maps become zero.
    pub fn normalized(raw: &Tensor) -> Result<Self> {
        let (b, h, w) = raw.dims3()?;
        let flat = raw.detach().reshape((b, h * w))?;
        let lo = flat.min_keepdim(1)?;
        let hi = flat.max_keepdim(1)?;
        let range = (&hi - &lo)?;
        let positive = range.gt(0.0)?;
        let safe = positive.where_cond(&range, &range.ones_like()?)?;
        let scaled = flat.broadcast_sub(&lo)?.broadcast_div(&safe)?.clamp(0.0, 1.0)?;
        let scaled = positive.broadcast_as(scaled.shape())?.where_cond(&scaled, &scaled.zeros_like()?)?;
        Ok(Self(scaled.reshape((b, h, w))?))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn same_shape(&self, other: &FlawMap) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(GctError::input(format!(
                "flaw map shapes differ: {:?} vs {:?}",
                self.0.shape(),
                other.0.shape()
            )));
        }
        Ok(())
    }
}

/// A `[B, H, W]` gate with values in `{0, 1}`; never carries gradient.
#[derive(Debug, Clone)]
pub struct BinaryMask(Tensor);

impl BinaryMask {
    fn from_bool(t: &Tensor, dtype: DType) -> Result<Self> {
        Ok(Self(t.to_dtype(dtype)?.detach()))
    }

    /// Builds a mask from explicit 0/1 values.
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        let vals = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if vals.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(GctError::input("mask values must be 0 or 1"));
        }
        Ok(Self(t.detach()))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    /// Number of pixels where the gate is open.
    pub fn count(&self) -> Result<f64> {
        Ok(self.0.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
    }
}

/// Weights and thresholds of the two unlabeled-data constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslWeights {
    pub lambda_dc: f64,
    pub lambda_fc: f64,
    /// Flaw threshold.
    pub xi: f64,
    /// Ramp-up length of the consistency weight, in epochs.
    pub eta: u32,
}

impl SslWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dc.is_finite() && self.lambda_dc >= 0.0) {
            return Err(GctError::config("lambda_dc", format!("must be >= 0, got {}", self.lambda_dc)));
        }
        if !(self.lambda_fc.is_finite() && self.lambda_fc >= 0.0) {
            return Err(GctError::config("lambda_fc", format!("must be >= 0, got {}", self.lambda_fc)));
        }
        check_xi(self.xi)
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(GctError::config("xi", format!("must lie in [0, 1], got {xi}")));
    }
    Ok(())
}

/// Sets every value strictly above `xi` to 1.
pub fn clamp_flaw(map: &FlawMap, xi: f64) -> Result<FlawMap> {
    check_xi(xi)?;
    let t = map.as_tensor();
    let above = t.gt(xi)?;
    Ok(FlawMap(above.where_cond(&t.ones_like()?, t)?))
}

/// Consistency gates: model k learns a pixel from the other model where its
/// own (clamped) flaw is strictly larger.
pub fn dc_masks(f1: &FlawMap, f2: &FlawMap) -> Result<(BinaryMask, BinaryMask)> {
    f1.same_shape(f2)?;
    let dtype = f1.as_tensor().dtype();
    let m1 = BinaryMask::from_bool(&f1.as_tensor().gt(f2.as_tensor())?, dtype)?;
    let m2 = BinaryMask::from_bool(&f2.as_tensor().gt(f1.as_tensor())?, dtype)?;
    Ok((m1, m2))
}

/// Flaw-correction gate: both models' flaws exceed `xi`.
pub fn fc_mask(f1: &FlawMap, f2: &FlawMap, xi: f64) -> Result<BinaryMask> {
    check_xi(xi)?;
    f1.same_shape(f2)?;
    let dtype = f1.as_tensor().dtype();
    let both = (f1.as_tensor().gt(xi)?.to_dtype(DType::U8)? * f2.as_tensor().gt(xi)?.to_dtype(DType::U8)?)?;
    BinaryMask::from_bool(&both, dtype)
}

/// Supervised criterion applied per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Softmax cross-entropy over the channel axis against class ids.
    CrossEntropy,
    /// `½ (pred - label)²` per value.
    SquaredError,
}

fn batch_mean(per_sample_sum: Tensor, batch: usize) -> Result<Tensor> {
    Ok((per_sample_sum / batch as f64)?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GctError::input(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_mask(pred: &Tensor, mask: &BinaryMask) -> Result<()> {
    let (b, h, w, _) = pred.dims4()?;
    if mask.as_tensor().dims() != [b, h, w] {
        return Err(GctError::input(format!(
            "mask shape {:?} does not match prediction {:?}",
            mask.as_tensor().dims(),
            pred.dims()
        )));
    }
    Ok(())
}

/// `½ Σ (pred - label)²` per sample, averaged over the batch.
pub fn loss_sup_mse(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    check_same(pred, label, "supervised loss")?;
    let b = pred.dim(0)?;
    batch_mean(((pred - label)?.sqr()?.sum_all()? * 0.5)?, b)
}

/// Pixel-summed softmax cross-entropy of `[B, H, W, K]` logits against `[B, H, W]` class ids.
pub fn loss_sup_ce(logits: &Tensor, classes: &Tensor) -> Result<Tensor> {
    let (b, h, w, k) = logits.dims4()?;
    if classes.dims() != [b, h, w] {
        return Err(GctError::input(format!(
            "class map shape {:?} does not match logits {:?}",
            classes.dims(),
            logits.dims()
        )));
    }
    let max_id = classes.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if max_id >= k as f64 {
        return Err(GctError::input(format!("class id {max_id} outside [0, {k})")));
    }
    let lse = logits.log_sum_exp(D::Minus1)?;
    let picked = logits
        .gather(&classes.to_dtype(DType::U32)?.unsqueeze(3)?, D::Minus1)?
        .squeeze(3)?;
    batch_mean((lse - picked)?.sum_all()?, b)
}

/// `½ Σ_{h,w} mask_k Σ_o (pred_k - pred_other)²` per sample, batch-averaged.
/// `pred_other` is a pseudo label and receives no gradient.
pub fn loss_dc(pred_k: &Tensor, pred_other: &Tensor, mask_k: &BinaryMask) -> Result<Tensor> {
    check_same(pred_k, pred_other, "consistency loss")?;
    check_mask(pred_k, mask_k)?;
    let b = pred_k.dim(0)?;
    let sq = (pred_k - pred_other.detach())?.sqr()?.sum(D::Minus1)?;
    batch_mean(((sq * mask_k.as_tensor())?.sum_all()? * 0.5)?, b)
}

/// `½ Σ mask · flaw²` per sample, batch-averaged.
pub fn loss_fc(flaw: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    check_same(flaw, mask.as_tensor(), "flaw correction loss")?;
    let b = flaw.dim(0)?;
    batch_mean(((flaw.sqr()? * mask.as_tensor())?.sum_all()? * 0.5)?, b)
}

/// `½ Σ (flaw_pred - flaw_gt)²` per sample, batch-averaged.
pub fn loss_flaw_detector(flaw_pred: &Tensor, flaw_gt: &Tensor) -> Result<Tensor> {
    check_same(flaw_pred, flaw_gt, "flaw detector loss")?;
    let b = flaw_pred.dim(0)?;
    batch_mean(((flaw_pred - flaw_gt.detach())?.sqr()?.sum_all()? * 0.5)?, b)
}

/// `sup + rampup · λ_dc · dc + λ_fc · fc`.
pub fn total_task_loss(sup: &Tensor, dc: &Tensor, fc: &Tensor, w: &SslWeights, rampup: f64) -> Result<Tensor> {
    Ok(((sup + (dc * (rampup * w.lambda_dc))?)? + (fc * w.lambda_fc)?)?)
}

/// Cosine ramp-up `½ (1 - cos(π · min(e, η) / η))`; identically 1 when `η = 0`.
pub fn cosine_rampup(epoch: f64, eta: u32) -> Result<f64> {
    if !(epoch >= 0.0) {
        return Err(GctError::input(format!("epoch must be >= 0, got {epoch}")));
    }
    if eta == 0 {
        return Ok(1.0);
    }
    let eta = eta as f64;
    Ok(0.5 * (1.0 - (std::f64::consts::PI * epoch.min(eta) / eta).cos()))
}
