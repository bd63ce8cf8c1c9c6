//! NoC benchmark over a corpus with JSON and CSV reports.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttentionNorm, FdrnConfig};
use crate::error::{Error, Result};
use crate::eval::metrics::{clicks_to_reach, noc_at_iou, TimingRecord};
use crate::eval::DatasetItem;
use crate::interaction::{make_misleading_schedule, run_session, MisleadingSchedule, Protocol, Segmenter};
use crate::training::sub_rng;

pub const NOC_THRESHOLDS: [f64; 3] = [0.80, 0.85, 0.90];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Standard,
    Misleading,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "misleading" => Ok(Self::Misleading),
            other => Err(Error::Invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

/// The switches compared in ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub decouple_guidance: bool,
    pub dynamic_scale: bool,
    pub b_high: usize,
    pub b_low: usize,
    pub bt_high: usize,
    pub bt_low: usize,
    pub mid_level_features: bool,
    pub attention_norm: AttentionNorm,
}

impl AblationFlags {
    pub fn of(cfg: &FdrnConfig) -> Self {
        Self {
            decouple_guidance: cfg.model.decouple_guidance,
            dynamic_scale: cfg.train.dynamic_scale,
            b_high: cfg.model.b_high,
            b_low: cfg.model.b_low,
            bt_high: cfg.model.bt_high,
            bt_low: cfg.model.bt_low,
            mid_level_features: cfg.model.mid_channels().is_some(),
            attention_norm: cfg.model.attention_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub instance: u8,
    pub noc80: usize,
    pub noc85: usize,
    pub noc90: usize,
    pub iou_trace: Vec<f64>,
    pub misleading_clicks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<MisleadingSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub noc80: f64,
    pub noc85: f64,
    pub noc90: f64,
    pub mean_final_iou: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[SampleRow], max_clicks: usize) -> Result<Self> {
        let traces: Vec<Vec<f64>> = rows.iter().map(|r| r.iou_trace.clone()).collect();
        let finals: Vec<f64> = traces.iter().map(|t| t.last().copied().unwrap_or(0.0)).collect();
        Ok(Self {
            samples: rows.len(),
            noc80: noc_at_iou(&traces, 0.80, max_clicks)?,
            noc85: noc_at_iou(&traces, 0.85, max_clicks)?,
            noc90: noc_at_iou(&traces, 0.90, max_clicks)?,
            mean_final_iou: finals.iter().sum::<f64>() / finals.len() as f64,
        })
    }
}

/// Deterministic part of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub max_clicks: usize,
    pub config_fingerprint: String,
    pub checkpoint_hash: Option<String>,
    pub flags: AblationFlags,
    pub aggregates: Aggregates,
    pub samples: Vec<SampleRow>,
}

/// Wall-clock part of a benchmark run; varies between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Which network stages the numbers cover.
    pub scope: String,
    pub mean: TimingRecord,
    pub per_sample: Vec<TimingRecord>,
}

/// Misleading schedules for `n` samples, derived from `seed` alone.
pub fn misleading_schedules(seed: u64, n: usize) -> Vec<MisleadingSchedule> {
    use rand::RngCore;
    (0..n).map(|i| make_misleading_schedule(sub_rng(seed, 0x7363_6865_6475_6c65, i as u64).next_u64())).collect()
}

/// Runs every item through the chosen protocol.
///
/// Misleading schedules are drawn before any model evaluation, so every
/// checkpoint sees the same sequence of click definitions for a given seed.
pub fn run_benchmark<S: Segmenter + Sync>(
    items: &[DatasetItem],
    seg: &S,
    config: &FdrnConfig,
    protocol: ProtocolKind,
    seed: u64,
    checkpoint_hash: Option<String>,
) -> Result<(BenchmarkReport, TimingReport)> {
    if items.is_empty() {
        return Err(Error::Dataset("no evaluation items".into()));
    }
    let max_clicks = config.interaction.max_clicks;
    let schedules = match protocol {
        ProtocolKind::Standard => vec![None; items.len()],
        ProtocolKind::Misleading => misleading_schedules(seed, items.len()).into_iter().map(Some).collect(),
    };
    let target = NOC_THRESHOLDS.iter().copied().fold(0.0, f64::max);
    let results = items
        .par_iter()
        .zip(schedules)
        .map(|(item, schedule)| {
            let proto = schedule.clone().map_or(Protocol::Standard, Protocol::Misleading);
            let out = run_session(item.image.clone(), &item.mask, seg, target, &config.interaction, &proto)?;
            let row = SampleRow {
                id: item.id.clone(),
                instance: item.instance,
                noc80: clicks_to_reach(&out.iou_trace, 0.80, max_clicks),
                noc85: clicks_to_reach(&out.iou_trace, 0.85, max_clicks),
                noc90: clicks_to_reach(&out.iou_trace, 0.90, max_clicks),
                misleading_clicks: out.misleading_clicks(),
                iou_trace: out.iou_trace,
                schedule,
            };
            Ok((row, out.timing))
        })
        .collect::<Result<Vec<_>>>()?;
    let (samples, per_sample): (Vec<SampleRow>, Vec<TimingRecord>) = results.into_iter().unzip();
    let n = per_sample.len() as f64;
    let mean = TimingRecord {
        t_f1: per_sample.iter().map(|t| t.t_f1).sum::<f64>() / n,
        t_f2: per_sample.iter().map(|t| t.t_f2).sum::<f64>() / n,
        n_click: per_sample.iter().map(|t| t.n_click).sum::<f64>() / n,
    };
    let report = BenchmarkReport {
        protocol,
        seed,
        max_clicks,
        config_fingerprint: config.fingerprint(),
        checkpoint_hash,
        flags: AblationFlags::of(config),
        aggregates: Aggregates::from_rows(&samples, max_clicks)?,
        samples,
    };
    let timing = TimingReport {
        scope: "t_f1: stage-1 feature extraction; t_f2: full stage-2 click step (guidance, crop, predictor, paste)".into(),
        mean,
        per_sample,
    };
    Ok((report, timing))
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,instance,noc80,noc85,noc90,final_iou,misleading_clicks,iou_trace\n");
        for r in &self.samples {
            let trace: Vec<String> = r.iou_trace.iter().map(|v| v.to_string()).collect();
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id,
                r.instance,
                r.noc80,
                r.noc85,
                r.noc90,
                r.iou_trace.last().copied().unwrap_or(0.0),
                r.misleading_clicks,
                trace.join(";")
            );
        }
        s
    }

    /// Writes `report.json`, `report.csv` and `timing.json` into `dir`.
    pub fn write(&self, timing: &TimingReport, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(timing)?)?;
        Ok(())
    }
}
