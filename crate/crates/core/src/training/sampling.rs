//! Dynamic-scale training samples.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{crop_resize, crop_resize3, RoiBox};
use crate::interaction::{simulate_next_click, ClickHistory, ClickPoint, Polarity};
use crate::raster::{BinaryMask, ImageTensor};
use crate::training::losses::erode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiDraw {
    pub roi: RoiBox,
    /// Area fraction of the image covered by `roi`, before rounding.
    pub proportion: f64,
    /// Whether the drawn proportion was raised to fit the object.
    pub clamped: bool,
}

/// Draws a region covering a random proportion of the image that contains
/// the object's bounding box, placed uniformly among feasible positions.
///
/// With dynamic scale disabled the proportion is `cfg.fixed_proportion`.
pub fn sample_dynamic_roi(dims: (usize, usize), gt: &BinaryMask, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<RoiDraw> {
    let (h, w) = dims;
    let (bt, bl, bb, br) = gt.bounds().ok_or_else(|| Error::Dataset("empty ground truth".into()))?;
    let drawn = if cfg.dynamic_scale { rng.random_range(cfg.min_proportion..=cfg.max_proportion) } else { cfg.fixed_proportion };
    let need = ((bb - bt) as f64 / h as f64).powi(2).max(((br - bl) as f64 / w as f64).powi(2));
    let clamped = need > drawn;
    if clamped {
        log::debug!("roi proportion {drawn:.3} raised to {need:.3} to fit the object");
    }
    let p = drawn.max(need).min(1.0);
    let side = |len: usize, obj: usize| ((len as f64 * p.sqrt()).round() as usize).clamp(obj.max(1), len);
    let (sh, sw) = (side(h, bb - bt), side(w, br - bl));
    let place = |rng: &mut dyn rand::RngCore, lo: usize, hi: usize, side: usize, len: usize| {
        let first = hi.saturating_sub(side);
        let last = lo.min(len - side);
        rng.random_range(first..=last)
    };
    let top = place(rng, bt, bb, sh, h);
    let left = place(rng, bl, br, sw, w);
    Ok(RoiDraw { roi: RoiBox::new(top, left, top + sh, left + sw), proportion: p, clamped })
}

/// Inputs of one training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `global_size` square resize of the whole image.
    pub global_image: Array3<f32>,
    /// `crop_size` square resize of the ROI.
    pub local_crop: Array3<f32>,
    pub gt_local: BinaryMask,
    pub roi: RoiBox,
    pub proportion: f64,
    pub source_dims: (usize, usize),
}

pub fn build_train_sample(
    image: &ImageTensor,
    gt: &BinaryMask,
    rng: &mut impl Rng,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainSample> {
    let dims = image.dims();
    if gt.dims() != dims {
        return Err(Error::Shape(format!("mask {:?} vs image {dims:?}", gt.dims())));
    }
    let draw = sample_dynamic_roi(dims, gt, rng, train)?;
    let global_image = crop_resize3(image.data(), &RoiBox::full(dims.0, dims.1), model.global_size)?;
    let local_crop = crop_resize3(image.data(), &draw.roi, model.crop_size)?;
    let gt_f = Array2::from_shape_fn(dims, |(r, c)| gt.get(r, c) as u8 as f32);
    let gt_local = BinaryMask::new(crop_resize(&gt_f, &draw.roi, model.crop_size)?.mapv(|v| v >= 0.5));
    Ok(TrainSample { global_image, local_crop, gt_local, roi: draw.roi, proportion: draw.proportion, source_dims: dims })
}

/// Training clicks for one round, in the frame of `gt`.
///
/// Round 1 draws `k ~ U{1..max_initial}` clicks: the first positive, each
/// further one positive or negative with equal odds. Positives come from the
/// foreground eroded by `radius` (the plain foreground if erosion empties it),
/// negatives from the background. Later rounds add the corrective click for
/// `current_pred`.
pub fn synthesize_train_clicks(
    gt: &BinaryMask,
    current_pred: Option<&BinaryMask>,
    rng: &mut impl Rng,
    round: usize,
    max_initial: usize,
    radius: usize,
) -> Result<Vec<ClickPoint>> {
    if gt.is_empty() {
        return Err(Error::Dataset("empty ground truth".into()));
    }
    if round > 1 {
        let (h, w) = gt.dims();
        let empty = BinaryMask::zeros(h, w);
        let pred = current_pred.unwrap_or(&empty);
        return Ok(simulate_next_click(pred, gt, Default::default())?.into_iter().collect());
    }
    let eroded = erode(gt, radius);
    let pos = if eroded.is_empty() { gt.foreground() } else { eroded.foreground() };
    let (h, w) = gt.dims();
    let neg = BinaryMask::from_fn(h, w, |(r, c)| !gt.get(r, c)).foreground();
    let k = rng.random_range(1..=max_initial.max(1));
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let positive = i == 0 || neg.is_empty() || rng.random_bool(0.5);
        let (pool, polarity) = if positive { (&pos, Polarity::Positive) } else { (&neg, Polarity::Negative) };
        let (row, col) = pool[rng.random_range(0..pool.len())];
        out.push(ClickPoint::new(row, col, polarity));
    }
    Ok(out)
}

pub fn extend_history(history: &mut ClickHistory, clicks: &[ClickPoint]) {
    for &c in clicks {
        history.push(c);
    }
}
