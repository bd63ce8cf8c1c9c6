use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Intersection over union; two empty masks agree perfectly.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Clicks needed by one trace: the 1-based index of the first IoU reaching
/// `threshold`, or `max_clicks`.
pub fn clicks_to_reach(trace: &[f64], threshold: f64, max_clicks: usize) -> usize {
    trace.iter().take(max_clicks).position(|&v| v >= threshold).map_or(max_clicks, |i| i + 1)
}

/// Mean clicks to reach `threshold` over per-sample IoU traces.
pub fn noc_at_iou(traces: &[Vec<f64>], threshold: f64, max_clicks: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Invalid("no traces to average".into()));
    }
    let total: usize = traces.iter().map(|t| clicks_to_reach(t, threshold, max_clicks)).sum();
    Ok(total as f64 / traces.len() as f64)
}

/// Stage costs in milliseconds; `n_click` may be a fractional mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub t_f1: f64,
    pub t_f2: f64,
    pub n_click: f64,
}

impl TimingRecord {
    pub fn new(t_f1: f64, t_f2: f64, n_click: f64) -> Self {
        Self { t_f1, t_f2, n_click }
    }
}

/// Total latency of an episode: `t_f1 + t_f2 * n_click`.
pub fn timing_total(rec: &TimingRecord) -> f64 {
    rec.t_f1 + rec.t_f2 * rec.n_click
}

/// Average latency per interaction: `t_f1 / n_click + t_f2`.
pub fn timing_average(rec: &TimingRecord) -> Result<f64> {
    if rec.n_click <= 0.0 {
        return Err(Error::Invalid("average time needs at least one click".into()));
    }
    Ok(rec.t_f1 / rec.n_click + rec.t_f2)
}
