//! Click maps and the decoupled guidance encoder.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use super::layers::{Conv, ConvNormAct, Scope};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{crop_resize, RoiBox};
use crate::interaction::{ClickPoint, ClickHistory};

/// Stage-2 guidance at crop resolution. Click maps hold positive and negative
/// planes, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceInput {
    pub current: Array3<f32>,
    pub historical: Array3<f32>,
    pub prev_mask: Array2<f32>,
}

impl GuidanceInput {
    pub fn zeros(crop_size: usize) -> Self {
        Self {
            current: Array3::zeros((2, crop_size, crop_size)),
            historical: Array3::zeros((2, crop_size, crop_size)),
            prev_mask: Array2::zeros((crop_size, crop_size)),
        }
    }

    /// Rasterizes `history` and the source-resolution `prev_mask` into the
    /// `crop_size` frame of `roi`.
    pub fn rasterize(
        history: &ClickHistory,
        prev_mask: &Array2<f32>,
        roi: &RoiBox,
        crop_size: usize,
        radius: usize,
    ) -> Result<Self> {
        let mut g = Self::zeros(crop_size);
        if let Some(cur) = history.current() {
            draw_click(&mut g.current, cur, roi, radius);
        }
        for c in history.historical() {
            draw_click(&mut g.historical, c, roi, radius);
        }
        g.prev_mask = crop_resize(prev_mask, roi, crop_size)?;
        Ok(g)
    }

    pub fn crop_size(&self) -> usize {
        self.prev_mask.dim().0
    }
}

/// Sets a disk of `radius` crop pixels around the click to one.
pub fn draw_click(maps: &mut Array3<f32>, click: &ClickPoint, roi: &RoiBox, radius: usize) {
    let (_, s, _) = maps.dim();
    let cy = (click.row as f64 + 0.5 - roi.top as f64) * s as f64 / roi.height() as f64 - 0.5;
    let cx = (click.col as f64 + 0.5 - roi.left as f64) * s as f64 / roi.width() as f64 - 0.5;
    let plane = if click.polarity.is_positive() { 0 } else { 1 };
    let mut map = maps.index_axis_mut(Axis(0), plane);
    let r = radius as f64;
    let r2 = r * r + 1e-9;
    let lo = |c: f64| (c - r).ceil().max(0.0) as usize;
    let hi = |c: f64| ((c + r).floor() + 1.0).clamp(0.0, s as f64) as usize;
    for i in lo(cy)..hi(cy) {
        for j in lo(cx)..hi(cx) {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            if dy * dy + dx * dx <= r2 {
                map[[i, j]] = 1.0;
            }
        }
    }
}

/// A batch of [`GuidanceInput`]s as tensors.
#[derive(Debug, Clone)]
pub struct GuidanceBatch {
    pub current: Tensor,
    pub historical: Tensor,
    pub prev_mask: Tensor,
}

impl GuidanceBatch {
    pub fn from_inputs(inputs: &[GuidanceInput], device: &Device, dtype: DType) -> Result<Self> {
        let s = inputs.first().ok_or_else(|| Error::Invalid("empty guidance batch".into()))?.crop_size();
        let b = inputs.len();
        let mut cur = Vec::with_capacity(b * 2 * s * s);
        let mut hist = Vec::with_capacity(b * 2 * s * s);
        let mut prev = Vec::with_capacity(b * s * s);
        for g in inputs {
            if g.crop_size() != s {
                return Err(Error::Shape("guidance inputs of different crop sizes".into()));
            }
            cur.extend(g.current.iter());
            hist.extend(g.historical.iter());
            prev.extend(g.prev_mask.iter());
        }
        let mk = |v: Vec<f32>, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, c, s, s), device)?.to_dtype(dtype)?)
        };
        Ok(Self { current: mk(cur, 2)?, historical: mk(hist, 2)?, prev_mask: mk(prev, 1)? })
    }
}

/// Guidance features at strides 4 (`g_low`) and 16 (`g_high`) of the crop.
#[derive(Debug, Clone)]
pub struct GuidanceFeatures {
    pub g_low: Tensor,
    pub g_high: Tensor,
}

/// 3x3 stride-2 convolution, normalization, activation and a learned output scale.
#[derive(Debug, Clone)]
pub struct Conv1S {
    block: ConvNormAct,
    scale: Tensor,
}

impl Conv1S {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        Ok(Self { block: ConvNormAct::new(&mut s.sub("block"), cin, cout, 3, 2, groups)?, scale: s.scalar("scale", 1.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.block.forward(x)?.broadcast_mul(&self.scale)?)
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceEncoder {
    current: Conv1S,
    historical: Option<Conv1S>,
    fuse: ConvNormAct,
    low_head: Conv,
    high_down: [ConvNormAct; 2],
}

impl GuidanceEncoder {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let (cg, cl, ch, ng) = (cfg.guidance_channels, cfg.low_channels(), cfg.high_channels(), cfg.norm_groups);
        let current = Conv1S::new(&mut s.sub("current"), 3, cg, ng)?;
        let historical = if cfg.decouple_guidance { Some(Conv1S::new(&mut s.sub("historical"), 3, cg, ng)?) } else { None };
        let fused_in = if cfg.decouple_guidance { 2 * cg } else { cg };
        Ok(Self {
            current,
            historical,
            fuse: ConvNormAct::new(&mut s.sub("fuse"), fused_in, cl, 3, 2, ng)?,
            low_head: Conv::new(&mut s.sub("low_head"), cl, cl, 1, 1)?,
            high_down: [
                ConvNormAct::new(&mut s.sub("high_down1"), cl, ch, 3, 2, ng)?,
                ConvNormAct::new(&mut s.sub("high_down2"), ch, ch, 3, 2, ng)?,
            ],
        })
    }

    pub fn encode(&self, g: &GuidanceBatch) -> Result<GuidanceFeatures> {
        let x = match &self.historical {
            Some(hist) => {
                let a = self.current.forward(&Tensor::cat(&[&g.current, &g.prev_mask], 1)?)?;
                let b = hist.forward(&Tensor::cat(&[&g.historical, &g.prev_mask], 1)?)?;
                Tensor::cat(&[a, b], 1)?
            }
            None => {
                let merged = g.current.maximum(&g.historical)?;
                self.current.forward(&Tensor::cat(&[&merged, &g.prev_mask], 1)?)?
            }
        };
        let f = self.fuse.forward(&x)?;
        let g_low = self.low_head.forward(&f)?;
        let g_high = self.high_down[1].forward(&self.high_down[0].forward(&f)?)?;
        Ok(GuidanceFeatures { g_low, g_high })
    }

    pub fn low_head_bias(&self) -> &Tensor {
        &self.low_head.bias
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::Polarity;
    use crate::model::layers::ParamStore;

    fn encoder(cfg: &ModelConfig, seed: u64) -> (ParamStore, GuidanceEncoder) {
        let mut ps = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let enc = GuidanceEncoder::new(&mut ps.root().sub("guidance"), cfg).unwrap();
        (ps, enc)
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn centered_click_draws_a_disk() {
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(16, 16, Polarity::Positive));
        let prev = Array2::zeros((32, 32));
        let g = GuidanceInput::rasterize(&h, &prev, &RoiBox::full(32, 32), 32, 5).unwrap();
        let pos = g.current.index_axis(Axis(0), 0);
        for ((i, j), &v) in pos.indexed_iter() {
            let d2 = (i as i64 - 16).pow(2) + (j as i64 - 16).pow(2);
            assert_eq!(v, if d2 <= 25 { 1.0 } else { 0.0 }, "pixel ({i}, {j})");
        }
        assert_eq!(pos.sum(), 81.0);
        assert_eq!(g.current.index_axis(Axis(0), 1).sum(), 0.0);
        assert_eq!(g.historical.sum(), 0.0);
    }

    #[test]
    fn maps_are_binary_and_split_by_recency() {
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(3, 3, Polarity::Positive));
        h.push(ClickPoint::new(5, 6, Polarity::Positive));
        h.push(ClickPoint::new(30, 30, Polarity::Negative));
        let g = GuidanceInput::rasterize(&h, &Array2::zeros((40, 40)), &RoiBox::full(40, 40), 32, 3).unwrap();
        assert!(g.current.iter().chain(g.historical.iter()).all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(g.current.index_axis(Axis(0), 0).sum(), 0.0);
        assert!(g.current.index_axis(Axis(0), 1).sum() > 0.0);
        assert!(g.historical.index_axis(Axis(0), 0).sum() > 0.0);
        assert_eq!(g.historical.index_axis(Axis(0), 1).sum(), 0.0);
    }

    #[test]
    fn zero_input_gives_bias_response() {
        let cfg = ModelConfig::tiny();
        let (_ps, enc) = encoder(&cfg, 3);
        let batch = GuidanceBatch::from_inputs(&[GuidanceInput::zeros(32)], &Device::Cpu, DType::F32).unwrap();
        let out = enc.encode(&batch).unwrap();
        assert_eq!(out.g_low.dims(), &[1, cfg.low_channels(), 8, 8]);
        assert_eq!(out.g_high.dims(), &[1, cfg.high_channels(), 2, 2]);
        let bias = values(enc.low_head_bias());
        for (k, v) in values(&out.g_low).iter().enumerate() {
            assert_eq!(*v, bias[k / 64]);
        }
        assert!(values(&out.g_high).iter().all(|&v| v == 0.0));
    }

    fn sample_input() -> GuidanceInput {
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(8, 9, Polarity::Positive));
        h.push(ClickPoint::new(20, 22, Polarity::Negative));
        let prev = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 3 + j) % 7) as f32 / 7.0);
        GuidanceInput::rasterize(&h, &prev, &RoiBox::full(32, 32), 32, 3).unwrap()
    }

    #[test]
    fn swapping_current_and_historical_changes_output() {
        let (_ps, enc) = encoder(&ModelConfig::tiny(), 5);
        let g = sample_input();
        let swapped = GuidanceInput { current: g.historical.clone(), historical: g.current.clone(), ..g.clone() };
        let run = |g: &GuidanceInput| {
            let b = GuidanceBatch::from_inputs(std::slice::from_ref(g), &Device::Cpu, DType::F32).unwrap();
            values(&enc.encode(&b).unwrap().g_low)
        };
        assert_ne!(run(&g), run(&swapped));
    }

    #[test]
    fn historical_params_only_affect_through_historical_branch() {
        let (ps, enc) = encoder(&ModelConfig::tiny(), 5);
        let g = sample_input();
        let b = GuidanceBatch::from_inputs(&[g], &Device::Cpu, DType::F32).unwrap();
        let before = values(&enc.encode(&b).unwrap().g_low);
        let w = ps.get("guidance.historical.block.conv.weight").unwrap();
        w.set(&(w.as_tensor() + 0.25).unwrap()).unwrap();
        let after = values(&enc.encode(&b).unwrap().g_low);
        assert_ne!(before, after);
        assert!(ps.vars_under("guidance.current").iter().all(|(n, _)| !n.contains("historical")));
    }

    #[test]
    fn coupled_variant_has_a_single_stem() {
        let cfg = ModelConfig { decouple_guidance: false, ..ModelConfig::tiny() };
        let (ps, enc) = encoder(&cfg, 1);
        assert!(ps.vars_under("guidance.historical").is_empty());
        let b = GuidanceBatch::from_inputs(&[sample_input()], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(enc.encode(&b).unwrap().g_high.dims(), &[1, cfg.high_channels(), 2, 2]);
    }
}
