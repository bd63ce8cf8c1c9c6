//! The two-stage network.

mod backbone;
mod guidance;
mod integrate;
pub mod layers;
mod predictor;

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};

pub use backbone::{HighViews, StratifiedExtractor};
pub use guidance::{draw_click, Conv1S, GuidanceBatch, GuidanceEncoder, GuidanceFeatures, GuidanceInput};
pub use integrate::{affinity, normalize_affinity, SemanticIntegration, TextureIntegration};
use layers::ParamStore;
pub use predictor::{FeatureCrops, MaskPredictor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{crop_resize3, roi_align, RoiBox};
use crate::raster::ImageTensor;

/// Cached stage-1 outputs for a batch of images.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// `(B, C_low, G/4, G/4)`.
    pub f_low: Tensor,
    /// `(B, C^k, G/16, G/16)`.
    pub f_high1: Tensor,
    pub f_high2: Tensor,
    /// `(B, C_mid, G/8, G/8)` when the mid-level branch is enabled.
    pub f_mid: Option<Tensor>,
    /// Side lengths of the resized global input.
    pub source_height: usize,
    pub source_width: usize,
    /// `(height, width)` of each original image; ROIs live in this frame.
    pub image_dims: Vec<(usize, usize)>,
}

impl FeatureBundle {
    pub fn batch_size(&self) -> usize {
        self.image_dims.len()
    }

    /// Aligns all cached grids to `rois`, one per batch entry.
    pub fn crops(&self, rois: &[RoiBox], crop_size: usize) -> Result<FeatureCrops> {
        let low = crop_size / 4;
        Ok(FeatureCrops {
            f_low: roi_align(&self.f_low, rois, &self.image_dims, low)?,
            f_mid: self.f_mid.as_ref().map(|f| roi_align(f, rois, &self.image_dims, low)).transpose()?,
            f_high1: roi_align(&self.f_high1, rois, &self.image_dims, crop_size / 16)?,
            f_high2: roi_align(&self.f_high2, rois, &self.image_dims, crop_size / 16)?,
        })
    }

    /// Cuts all grids loose from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            f_low: self.f_low.detach(),
            f_high1: self.f_high1.detach(),
            f_high2: self.f_high2.detach(),
            f_mid: self.f_mid.as_ref().map(|t| t.detach()),
            ..self.clone()
        }
    }
}

pub struct FdrnModel {
    config: ModelConfig,
    params: ParamStore,
    pub extractor: StratifiedExtractor,
    pub predictor: MaskPredictor,
    stage1_calls: AtomicU64,
    stage2_calls: AtomicU64,
}

impl FdrnModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, dtype, device);
        let extractor = StratifiedExtractor::new(&mut params.root().sub("stage1"), config)?;
        let predictor = MaskPredictor::new(&mut params.root().sub("stage2"), config)?;
        Ok(Self {
            config: config.clone(),
            params,
            extractor,
            predictor,
            stage1_calls: AtomicU64::new(0),
            stage2_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn stage1_calls(&self) -> u64 {
        self.stage1_calls.load(Ordering::Relaxed)
    }

    pub fn stage2_calls(&self) -> u64 {
        self.stage2_calls.load(Ordering::Relaxed)
    }

    /// Runs stage 1 on a `(B, 3, G, G)` batch of globally resized images
    /// whose originals measure `image_dims`.
    pub fn extract_stratified_features(&self, global: &Tensor, image_dims: &[(usize, usize)]) -> Result<FeatureBundle> {
        let (b, c, h, w) = global.dims4()?;
        let g = self.config.global_size;
        if c != 3 || h != g || w != g {
            return Err(Error::Config(format!("stage-1 input is {c}x{h}x{w}, configured for 3x{g}x{g}")));
        }
        if image_dims.len() != b {
            return Err(Error::Shape(format!("{} image sizes for a batch of {b}", image_dims.len())));
        }
        self.stage1_calls.fetch_add(1, Ordering::Relaxed);
        let out = self.extractor.forward(global)?;
        Ok(FeatureBundle {
            f_low: out.f_low,
            f_high1: out.f_high1,
            f_high2: out.f_high2,
            f_mid: out.f_mid,
            source_height: h,
            source_width: w,
            image_dims: image_dims.to_vec(),
        })
    }

    /// Resizes `image` to the global input size and runs stage 1.
    pub fn extract_image(&self, image: &ImageTensor) -> Result<FeatureBundle> {
        let global = self.global_input(image)?;
        self.extract_stratified_features(&global, &[image.dims()])
    }

    pub fn global_input(&self, image: &ImageTensor) -> Result<Tensor> {
        let (h, w) = image.dims();
        let g = self.config.global_size;
        image_tensor(&crop_resize3(image.data(), &RoiBox::full(h, w), g)?, self.device(), self.dtype())
    }

    /// `roi` of `image` resized to the stage-2 crop, `(1, 3, S, S)`.
    pub fn crop_input(&self, image: &ImageTensor, roi: &RoiBox) -> Result<Tensor> {
        image_tensor(&crop_resize3(image.data(), roi, self.config.crop_size)?, self.device(), self.dtype())
    }

    /// Stage-2 logits for one step; `features` must come from stage 1.
    pub fn predict_logits(
        &self,
        image_crop: &Tensor,
        guidance: &GuidanceBatch,
        features: Option<&FeatureBundle>,
        rois: &[RoiBox],
    ) -> Result<Tensor> {
        let features = features.ok_or(Error::CacheMiss)?;
        let s = self.config.crop_size;
        let (_, _, h, w) = image_crop.dims4()?;
        if (h, w) != (s, s) {
            return Err(Error::Config(format!("stage-2 input is {h}x{w}, configured for {s}x{s}")));
        }
        self.stage2_calls.fetch_add(1, Ordering::Relaxed);
        let crops = features.crops(rois, s)?;
        self.predictor.forward(image_crop, guidance, &crops)
    }

    /// Per-pixel foreground probabilities `(B, 1, S, S)`.
    pub fn predict_mask_step(
        &self,
        image_crop: &Tensor,
        guidance: &GuidanceBatch,
        features: Option<&FeatureBundle>,
        rois: &[RoiBox],
    ) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.predict_logits(image_crop, guidance, features, rois)?)?)
    }

    /// Overwrites parameters by name; every parameter must be present.
    pub fn load_params(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.vars() {
            let t = tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{name}: expected {:?}, found {:?}", var.dims(), t.dims())));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| self.params.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

fn image_tensor(hwc: &ndarray::Array3<f32>, device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w, _) = hwc.dim();
    let chw: Vec<f32> = hwc.view().permuted_axes([2, 0, 1]).iter().copied().collect();
    Ok(Tensor::from_vec(chw, (1, 3, h, w), device)?.to_dtype(dtype)?)
}
