//! Segmentation losses on probability tensors.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{LossMode, TrainConfig};
use crate::error::Result;
use crate::raster::BinaryMask;

pub const LOSS_EPS: f64 = 1e-8;

/// Loss values of one step, logged separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bce: f64,
    pub nfl: f64,
    pub bnfl: f64,
    pub total: f64,
}

/// Differentiable counterparts of [`LossTerms`].
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub bce: Tensor,
    pub nfl: Tensor,
    pub bnfl: Tensor,
    pub total: Tensor,
}

impl LossTensors {
    pub fn values(&self) -> Result<LossTerms> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossTerms { bce: v(&self.bce)?, nfl: v(&self.nfl)?, bnfl: v(&self.bnfl)?, total: v(&self.total)? })
    }
}

/// Probability assigned to the true class, bounded away from zero.
fn true_class_prob(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let pt = ((gt * pred)? + ((1.0 - gt)? * (1.0 - pred)?)?)?;
    Ok(pt.clamp(LOSS_EPS, 1.0)?)
}

/// Sum over all but the batch axis.
fn per_sample_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// Focal loss normalized by the focal weights, restricted to `region` when
/// given, computed per sample and averaged over the batch.
fn normalized_focal(pred: &Tensor, gt: &Tensor, gamma: f64, region: Option<&Tensor>) -> Result<Tensor> {
    let pt = true_class_prob(pred, gt)?;
    let mut beta = (1.0 - &pt)?.clamp(LOSS_EPS, 1.0)?.powf(gamma)?;
    if let Some(r) = region {
        beta = (beta * r)?;
    }
    let num = per_sample_sum(&(&beta * pt.log()?.neg()?)?)?;
    let den = (per_sample_sum(&beta)? + LOSS_EPS)?;
    Ok((num / den)?.mean(0)?)
}

/// Normalized focal loss of `(B, 1, H, W)` probabilities against `{0, 1}` targets.
pub fn nfl_loss(pred: &Tensor, gt: &Tensor, gamma: f64) -> Result<Tensor> {
    normalized_focal(pred, gt, gamma, None)
}

/// [`nfl_loss`] over the boundary `band` only.
pub fn bnfl_loss(pred: &Tensor, gt: &Tensor, band: &Tensor, gamma: f64) -> Result<Tensor> {
    normalized_focal(pred, gt, gamma, Some(band))
}

/// Mean binary cross-entropy.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(true_class_prob(pred, gt)?.log()?.neg()?.mean_all()?)
}

/// Square-window dilation (`grow`) or erosion; pixels beyond the frame are background.
fn morph(mask: &BinaryMask, r: usize, grow: bool) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |(y, x)| {
        let window_inside = y >= r && x >= r && y + r < h && x + r < w;
        let mut any = false;
        let mut all = window_inside;
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                let v = mask.get(yy, xx);
                any |= v;
                all &= v;
            }
        }
        if grow {
            any
        } else {
            all
        }
    })
}

pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    morph(mask, r, true)
}

pub fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    morph(mask, r, false)
}

/// Pixels within `r` of the object boundary: `dilate(gt, r) XOR erode(gt, r)`.
pub fn boundary_band(gt: &BinaryMask, r: usize) -> BinaryMask {
    let (d, e) = (dilate(gt, r), erode(gt, r));
    let (h, w) = gt.dims();
    BinaryMask::from_fn(h, w, |(y, x)| d.get(y, x) != e.get(y, x))
}

/// `(B, 1, H, W)` tensor of `{0, 1}` values.
pub fn masks_to_tensor(masks: &[BinaryMask], device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w) = masks[0].dims();
    let v: Vec<f32> = masks.iter().flat_map(|m| m.data().iter().map(|&b| b as u8 as f32)).collect();
    Ok(Tensor::from_vec(v, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Loss terms for a batch. `band` holds the boundary bands of `gt`.
pub fn combined_loss(pred: &Tensor, gt: &Tensor, band: &Tensor, cfg: &TrainConfig) -> Result<LossTensors> {
    let nfl = nfl_loss(pred, gt, cfg.gamma)?;
    match cfg.loss_mode {
        LossMode::Ritm => {
            let zero = nfl.zeros_like()?;
            Ok(LossTensors { bce: zero.clone(), bnfl: zero, total: nfl.clone(), nfl })
        }
        LossMode::FocalClick => {
            let bce = bce_loss(pred, gt)?;
            let bnfl = bnfl_loss(pred, gt, band, cfg.gamma)?;
            let total = ((&bce + &nfl)? + &bnfl)?;
            Ok(LossTensors { bce, nfl, bnfl, total })
        }
    }
}
