//! Wall-clock latency of cached versus recomputed feature extraction.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::InteractionConfig;
use crate::error::Result;
use crate::interaction::{effective_click, run_interaction_step, Monolithic, Segmenter, SessionState, Stage};
use crate::raster::{BinaryMask, ImageTensor};

pub const WARMUP_RUNS: usize = 3;
pub const TIMED_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub clicks: usize,
    /// Median stage-1 time.
    pub t_f1_ms: f64,
    /// Median time of each click step.
    pub step_ms: Vec<f64>,
    /// Mean of `step_ms`.
    pub t_f2_ms: f64,
    /// `(t_f1 + sum of the first n steps) / n` for `n = 1..=clicks`.
    pub average_per_interaction_ms: Vec<f64>,
    pub cached_total_ms: f64,
    /// Median total when stage 1 is recomputed on every click.
    pub monolithic_total_ms: Option<f64>,
}

impl LatencyProfile {
    /// Fraction of the monolithic time that caching is expected to save.
    pub fn predicted_saving(&self) -> f64 {
        self.t_f1_ms / (self.t_f1_ms + self.t_f2_ms)
    }

    pub fn measured_saving(&self) -> Option<f64> {
        self.monolithic_total_ms.map(|m| 1.0 - self.cached_total_ms / m)
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One episode of exactly `clicks` corrective clicks; returns the stage-1
/// time and the per-step times.
fn episode<S: Segmenter>(seg: &S, image: &Arc<ImageTensor>, gt: &BinaryMask, clicks: usize, cfg: &InteractionConfig) -> Result<(f64, Vec<f64>)> {
    let mut session = SessionState::open(image.clone(), seg)?;
    for _ in 0..clicks {
        let pred = session.last_mask.binarize();
        let click = effective_click(&pred, gt, cfg.placement)?.expect("nonempty ground truth");
        run_interaction_step(&mut session, click, seg, cfg)?;
    }
    let t1 = session.stage_times(Stage::Stage1).sum();
    Ok((t1, session.stage_times(Stage::Stage2).collect()))
}

/// Times sessions sequentially after discarding warm-up runs.
pub fn measure_latency<S: Segmenter>(
    seg: &S,
    image: Arc<ImageTensor>,
    gt: &BinaryMask,
    clicks: usize,
    cfg: &InteractionConfig,
    with_monolithic: bool,
) -> Result<LatencyProfile> {
    for _ in 0..WARMUP_RUNS {
        episode(seg, &image, gt, clicks, cfg)?;
    }
    let mut t1 = Vec::with_capacity(TIMED_RUNS);
    let mut steps = vec![Vec::with_capacity(TIMED_RUNS); clicks];
    for _ in 0..TIMED_RUNS {
        let (a, s) = episode(seg, &image, gt, clicks, cfg)?;
        t1.push(a);
        for (k, v) in s.into_iter().enumerate() {
            steps[k].push(v);
        }
    }
    let t_f1_ms = median(&mut t1);
    let step_ms: Vec<f64> = steps.iter_mut().map(|v| median(v)).collect();
    let t_f2_ms = step_ms.iter().sum::<f64>() / clicks.max(1) as f64;
    let mut acc = t_f1_ms;
    let average_per_interaction_ms = step_ms
        .iter()
        .enumerate()
        .map(|(k, s)| {
            acc += s;
            acc / (k + 1) as f64
        })
        .collect();
    let cached_total_ms = t_f1_ms + step_ms.iter().sum::<f64>();
    let monolithic_total_ms = if with_monolithic {
        let mono = Monolithic(seg);
        let mut totals = Vec::with_capacity(TIMED_RUNS);
        for run in 0..WARMUP_RUNS + TIMED_RUNS {
            let start = Instant::now();
            episode(&mono, &image, gt, clicks, cfg)?;
            if run >= WARMUP_RUNS {
                totals.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        Some(median(&mut totals))
    } else {
        None
    };
    Ok(LatencyProfile { clicks, t_f1_ms, step_ms, t_f2_ms, average_per_interaction_ms, cached_total_ms, monolithic_total_ms })
}
