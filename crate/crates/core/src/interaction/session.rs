//! Interactive episodes over a cached feature bundle.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::InteractionConfig;
use crate::error::{Error, Result};
use crate::eval::{iou, TimingRecord};
use crate::geometry::{paste, RoiBox};
use crate::interaction::{
    apply_misleading_click, compute_roi, effective_click, ClickHistory, ClickPoint, MisleadingKind, MisleadingSchedule,
};
use crate::model::{FdrnModel, FeatureBundle, GuidanceBatch, GuidanceInput};
use crate::raster::{BinaryMask, ImageTensor, ProbMask};

/// Anything that segments from clicks in two stages.
pub trait Segmenter {
    type Features;

    /// Stage 1, run once per image.
    fn extract(&self, image: &ImageTensor) -> Result<Self::Features>;

    /// Stage 2: the source-resolution mask after the latest click in `history`.
    fn refine(
        &self,
        image: &ImageTensor,
        features: &Self::Features,
        history: &ClickHistory,
        prev: &ProbMask,
        roi: &RoiBox,
    ) -> Result<ProbMask>;

    /// Smallest Zoom-In side for an image of `dims`, in source pixels.
    fn roi_min_side(&self, _dims: (usize, usize), _cfg: &InteractionConfig) -> f64 {
        0.0
    }
}

impl Segmenter for FdrnModel {
    type Features = FeatureBundle;

    fn extract(&self, image: &ImageTensor) -> Result<FeatureBundle> {
        self.extract_image(image)
    }

    fn refine(
        &self,
        image: &ImageTensor,
        features: &FeatureBundle,
        history: &ClickHistory,
        prev: &ProbMask,
        roi: &RoiBox,
    ) -> Result<ProbMask> {
        let cfg = self.config();
        let g = GuidanceInput::rasterize(history, prev.data(), roi, cfg.crop_size, cfg.click_radius)?;
        let g = GuidanceBatch::from_inputs(&[g], self.device(), self.dtype())?;
        let crop = self.crop_input(image, roi)?;
        let probs = self.predict_mask_step(&crop, &g, Some(features), &[*roi])?;
        let s = cfg.crop_size;
        let probs: Vec<f32> = probs.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        let crop = ndarray::Array2::from_shape_vec((s, s), probs).map_err(|e| Error::Shape(e.to_string()))?;
        let mut out = prev.clone();
        paste(out.data_mut(), &crop, roi)?;
        Ok(out)
    }

    fn roi_min_side(&self, dims: (usize, usize), cfg: &InteractionConfig) -> f64 {
        let m = self.config();
        cfg.min_side_fraction * m.crop_size as f64 * dims.0.max(dims.1) as f64 / m.global_size as f64
    }
}

/// Recomputes stage 1 on every click instead of caching it.
pub struct Monolithic<'a, S>(pub &'a S);

impl<S: Segmenter> Segmenter for Monolithic<'_, S> {
    type Features = ();

    fn extract(&self, _image: &ImageTensor) -> Result<()> {
        Ok(())
    }

    fn refine(&self, image: &ImageTensor, _: &(), history: &ClickHistory, prev: &ProbMask, roi: &RoiBox) -> Result<ProbMask> {
        let features = self.0.extract(image)?;
        self.0.refine(image, &features, history, prev, roi)
    }

    fn roi_min_side(&self, dims: (usize, usize), cfg: &InteractionConfig) -> f64 {
        self.0.roi_min_side(dims, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

pub struct SessionState<F> {
    pub image: Arc<ImageTensor>,
    pub features: Option<Arc<F>>,
    pub history: ClickHistory,
    pub last_mask: ProbMask,
    /// Wall-clock milliseconds per stage invocation.
    pub timing: Vec<(Stage, f64)>,
    pub iteration: usize,
}

impl<F> SessionState<F> {
    /// Runs stage 1 and records its latency.
    pub fn open<S: Segmenter<Features = F>>(image: Arc<ImageTensor>, seg: &S) -> Result<Self> {
        let start = Instant::now();
        let features = seg.extract(&image)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let mut s = Self::with_features(image, Arc::new(features));
        s.timing.push((Stage::Stage1, ms));
        Ok(s)
    }

    /// A fresh episode over an already extracted, shared bundle.
    pub fn with_features(image: Arc<ImageTensor>, features: Arc<F>) -> Self {
        let (h, w) = image.dims();
        Self {
            image,
            features: Some(features),
            history: ClickHistory::new(),
            last_mask: ProbMask::zeros(h, w),
            timing: vec![],
            iteration: 0,
        }
    }

    pub fn stage_times(&self, stage: Stage) -> impl Iterator<Item = f64> + '_ {
        self.timing.iter().filter(move |(s, _)| *s == stage).map(|(_, ms)| *ms)
    }
}

/// ROI used for the click just appended to `history`.
pub fn step_roi(history: &ClickHistory, prev: &ProbMask, min_side: f64, cfg: &InteractionConfig) -> RoiBox {
    let (h, w) = prev.dims();
    let prev_bin = prev.binarize();
    if history.len() <= cfg.zoom_skip_clicks || prev_bin.is_empty() {
        return RoiBox::full(h, w);
    }
    compute_roi(history, &prev_bin, cfg.expansion, min_side, (h, w))
}

/// Appends `click`, refines the mask inside its ROI and records the stage-2 time.
pub fn run_interaction_step<S: Segmenter>(
    session: &mut SessionState<S::Features>,
    click: ClickPoint,
    seg: &S,
    cfg: &InteractionConfig,
) -> Result<(ProbMask, f64, RoiBox)> {
    let features = session.features.clone().ok_or(Error::CacheMiss)?;
    let (h, w) = session.image.dims();
    if click.row >= h || click.col >= w {
        return Err(Error::Invalid(format!("click ({}, {}) outside the {h}x{w} image", click.row, click.col)));
    }
    let mut history = session.history.clone();
    history.push(click);
    let roi = step_roi(&history, &session.last_mask, seg.roi_min_side((h, w), cfg), cfg);
    let start = Instant::now();
    let mask = seg.refine(&session.image, &features, &history, &session.last_mask, &roi)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    session.history = history;
    session.last_mask = mask.clone();
    session.iteration += 1;
    session.timing.push((Stage::Stage2, ms));
    Ok((mask, ms, roi))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    /// Corrective clicks until the target IoU or the click budget.
    Standard,
    /// All scheduled clicks, some of them deliberately misleading.
    Misleading(MisleadingSchedule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub click: ClickPoint,
    pub misleading: Option<MisleadingKind>,
    pub roi: RoiBox,
    pub iou: f64,
    pub t_f2_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub noc: usize,
    pub iou_trace: Vec<f64>,
    pub steps: Vec<StepTrace>,
    pub timing: TimingRecord,
}

impl SessionOutcome {
    pub fn misleading_clicks(&self) -> usize {
        self.steps.iter().filter(|s| s.misleading.is_some()).count()
    }

    /// One JSON object per line: a stage-1 record, then one per click.
    pub fn write_trace_jsonl(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", serde_json::json!({"stage": "stage1", "t_f1_ms": self.timing.t_f1}))?;
        for (i, s) in self.steps.iter().enumerate() {
            let rec = serde_json::json!({
                "step": i + 1,
                "click": s.click,
                "misleading": s.misleading,
                "iou": s.iou,
                "t_f2_ms": s.t_f2_ms,
            });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

/// Simulated episode on one `(image, gt)` pair.
///
/// Stage 1 runs once. Under [`Protocol::Standard`] the loop stops at
/// `target_iou` or `cfg.max_clicks`; under [`Protocol::Misleading`] every
/// scheduled click is played and the number of clicks is read off the trace.
pub fn run_session<S: Segmenter>(
    image: Arc<ImageTensor>,
    gt: &BinaryMask,
    seg: &S,
    target_iou: f64,
    cfg: &InteractionConfig,
    protocol: &Protocol,
) -> Result<SessionOutcome> {
    if gt.dims() != image.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", gt.dims(), image.dims())));
    }
    if gt.is_empty() {
        return Err(Error::Invalid("ground-truth mask is empty".into()));
    }
    let mut session = SessionState::open(image, seg)?;
    let (budget, mut rng) = match protocol {
        Protocol::Standard => (cfg.max_clicks, ChaCha8Rng::seed_from_u64(0)),
        Protocol::Misleading(s) => (s.total_clicks, ChaCha8Rng::seed_from_u64(s.seed ^ 0x6d69_736c_6561_6421)),
    };
    let mut steps = Vec::with_capacity(budget);
    let mut reached = None;
    for t in 1..=budget {
        let pred = session.last_mask.binarize();
        let kind = match protocol {
            Protocol::Misleading(s) => s.kind_at(t),
            Protocol::Standard => None,
        };
        let click = match kind {
            Some(k) => apply_misleading_click(k, &pred, gt, &mut rng, cfg.placement)?,
            None => effective_click(&pred, gt, cfg.placement)?,
        };
        let click = click.ok_or_else(|| Error::Invalid("no click could be placed".into()))?;
        let (mask, ms, roi) = run_interaction_step(&mut session, click, seg, cfg)?;
        let score = iou(&mask.binarize(), gt)?;
        steps.push(StepTrace { click: *session.history.current().unwrap(), misleading: kind, roi, iou: score, t_f2_ms: ms });
        if score >= target_iou && reached.is_none() {
            reached = Some(t);
            if *protocol == Protocol::Standard {
                break;
            }
        }
    }
    let t_f2: Vec<f64> = session.stage_times(Stage::Stage2).collect();
    let timing = TimingRecord {
        t_f1: session.stage_times(Stage::Stage1).sum(),
        t_f2: t_f2.iter().sum::<f64>() / t_f2.len().max(1) as f64,
        n_click: t_f2.len() as f64,
    };
    Ok(SessionOutcome {
        noc: reached.unwrap_or(cfg.max_clicks),
        iou_trace: steps.iter().map(|s| s.iou).collect(),
        steps,
        timing,
    })
}
