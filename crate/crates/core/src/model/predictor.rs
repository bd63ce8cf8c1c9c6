//! Stage-2 iterative mask predictor.

use candle_core::Tensor;

use super::guidance::{GuidanceBatch, GuidanceEncoder};
use super::integrate::{SemanticIntegration, TextureIntegration};
use super::layers::{BasicBlock, Conv, ConvNormAct, Scope};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::upsample;

/// Cached features aligned to the current ROI.
#[derive(Debug, Clone)]
pub struct FeatureCrops {
    pub f_low: Tensor,
    pub f_mid: Option<Tensor>,
    pub f_high1: Tensor,
    pub f_high2: Tensor,
}

/// Image, both click maps and the previous mask.
const REFINE_EXTRA: usize = 3 + 2 + 2 + 1;

#[derive(Debug, Clone)]
pub struct MaskPredictor {
    pub guidance: GuidanceEncoder,
    crop_stem: [ConvNormAct; 2],
    low_blocks: Vec<BasicBlock>,
    high_blocks: Vec<BasicBlock>,
    pub semantic: SemanticIntegration,
    pub texture: TextureIntegration,
    head_high: Conv,
    head: ConvNormAct,
    refine: ConvNormAct,
    out: Conv,
    bt_low: usize,
    bt_high: usize,
}

impl MaskPredictor {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let (cl, ch, ng) = (cfg.low_channels(), cfg.high_channels(), cfg.norm_groups);
        let blocks = |s: &mut Scope, name: &str, c: usize| -> Result<Vec<BasicBlock>> {
            (1..=cfg.stage2_blocks).map(|i| BasicBlock::new(&mut s.sub(&format!("{name}.block{i}")), c, ng)).collect()
        };
        Ok(Self {
            guidance: GuidanceEncoder::new(&mut s.sub("guidance"), cfg)?,
            crop_stem: [
                ConvNormAct::new(&mut s.sub("crop_stem1"), 3, cl, 3, 2, ng)?,
                ConvNormAct::new(&mut s.sub("crop_stem2"), cl, cl, 3, 2, ng)?,
            ],
            low_blocks: blocks(s, "low", cl)?,
            high_blocks: blocks(s, "high", ch)?,
            semantic: SemanticIntegration::new(&mut s.sub("semantic"), ch, cfg.attention_norm)?,
            texture: TextureIntegration::new(&mut s.sub("texture"), cl, cl + cfg.mid_channels().unwrap_or(0))?,
            head_high: Conv::new(&mut s.sub("head_high"), ch, cl, 1, 1)?,
            head: ConvNormAct::new(&mut s.sub("head"), cl, cl, 3, 1, ng)?,
            refine: ConvNormAct::new(&mut s.sub("refine"), cl + REFINE_EXTRA, cl, 3, 1, ng)?,
            out: Conv::new(&mut s.sub("out"), cl, 1, 1, 1)?,
            bt_low: cfg.bt_low,
            bt_high: cfg.bt_high,
        })
    }

    /// Mask logits `(B, 1, S, S)` for `(B, 3, S, S)` image crops.
    pub fn forward(&self, image_crop: &Tensor, guidance: &GuidanceBatch, crops: &FeatureCrops) -> Result<Tensor> {
        let g = self.guidance.encode(guidance)?;
        let mut low = self.crop_stem[1].forward(&self.crop_stem[0].forward(image_crop)?)?;
        low = (low + &g.g_low)?;
        for (i, block) in self.low_blocks.iter().enumerate() {
            low = block.forward(&low)?;
            if i + 1 == self.bt_low {
                low = self.texture.forward(&low, &crops.f_low, crops.f_mid.as_ref())?;
            }
        }
        let mut high = g.g_high;
        for (i, block) in self.high_blocks.iter().enumerate() {
            high = block.forward(&high)?;
            if i + 1 == self.bt_high {
                high = self.semantic.forward(&crops.f_high1, &crops.f_high2, &high)?;
            }
        }
        let fused = (low + upsample(&self.head_high.forward(&high)?, 4)?)?;
        let coarse = upsample(&self.head.forward(&fused)?, 4)?;
        // Full-resolution refinement sees the crop and the raw guidance maps.
        let x = Tensor::cat(&[&coarse, image_crop, &guidance.current, &guidance.historical, &guidance.prev_mask], 1)?;
        self.out.forward(&self.refine.forward(&x)?)
    }
}
