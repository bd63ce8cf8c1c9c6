//! Stage-1 stratified feature extractor.

use candle_core::Tensor;

use super::layers::{BasicBlock, Conv, ConvNormAct, Scope};
use crate::config::ModelConfig;
use crate::error::Result;

/// Two independent 1x1 projections of the high-level features.
#[derive(Debug, Clone)]
pub struct HighViews {
    pub view1: Conv,
    pub view2: Conv,
}

impl HighViews {
    pub fn new(s: &mut Scope, channels: usize, ck: usize) -> Result<Self> {
        Ok(Self { view1: Conv::new(&mut s.sub("view1"), channels, ck, 1, 1)?, view2: Conv::new(&mut s.sub("view2"), channels, ck, 1, 1)? })
    }

    pub fn project(&self, f_high: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.view1.forward(f_high)?, self.view2.forward(f_high)?))
    }
}

#[derive(Debug, Clone)]
struct Branch {
    entry: Vec<ConvNormAct>,
    blocks: Vec<BasicBlock>,
}

impl Branch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.entry {
            x = layer.forward(&x)?;
        }
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }
}

/// Multi-resolution convnet tapping low-level features at stride 4 and
/// high-level features at stride 16 (and optionally mid-level at stride 8).
///
/// Only the blocks up to each tap are instantiated: deeper blocks would never
/// influence a cached output.
#[derive(Debug, Clone)]
pub struct StratifiedExtractor {
    stem: Vec<ConvNormAct>,
    low: Branch,
    mid: Option<Branch>,
    high: Branch,
    pub views: HighViews,
}

pub struct Stage1Output {
    pub f_low: Tensor,
    pub f_mid: Option<Tensor>,
    pub f_high1: Tensor,
    pub f_high2: Tensor,
}

impl StratifiedExtractor {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let (cl, ch, ng) = (cfg.low_channels(), cfg.high_channels(), cfg.norm_groups);
        let stem = vec![
            ConvNormAct::new(&mut s.sub("stem1"), 3, cl, 3, 2, ng)?,
            ConvNormAct::new(&mut s.sub("stem2"), cl, cl, 3, 2, ng)?,
        ];
        let blocks = |s: &mut Scope, name: &str, c: usize, n: usize| -> Result<Vec<BasicBlock>> {
            (1..=n).map(|i| BasicBlock::new(&mut s.sub(&format!("{name}.block{i}")), c, ng)).collect()
        };
        let low = Branch { entry: vec![], blocks: blocks(s, "low", cl, cfg.b_low)? };
        let mid = match cfg.mid_channels() {
            Some(cm) => Some(Branch {
                entry: vec![ConvNormAct::new(&mut s.sub("mid.down1"), cl, cm, 3, 2, ng)?],
                blocks: blocks(s, "mid", cm, cfg.b_low)?,
            }),
            None => None,
        };
        let high = Branch {
            entry: vec![
                ConvNormAct::new(&mut s.sub("high.down1"), cl, ch, 3, 2, ng)?,
                ConvNormAct::new(&mut s.sub("high.down2"), ch, ch, 3, 2, ng)?,
            ],
            blocks: blocks(s, "high", ch, cfg.b_high)?,
        };
        let views = HighViews::new(&mut s.sub("views"), ch, cfg.ck_channels)?;
        Ok(Self { stem, low, mid, high, views })
    }

    /// `x` is a `(B, 3, G, G)` batch of globally resized images.
    pub fn forward(&self, x: &Tensor) -> Result<Stage1Output> {
        let mut stem = x.clone();
        for layer in &self.stem {
            stem = layer.forward(&stem)?;
        }
        let f_low = self.low.forward(&stem)?;
        let f_mid = self.mid.as_ref().map(|b| b.forward(&stem)).transpose()?;
        let f_high = self.high.forward(&stem)?;
        let (f_high1, f_high2) = self.views.project(&f_high)?;
        Ok(Stage1Output { f_low, f_mid, f_high1, f_high2 })
    }
}
