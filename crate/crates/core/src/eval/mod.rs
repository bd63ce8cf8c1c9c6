//! Metrics, corpora and benchmarks.

mod bench;
mod dataset;
mod latency;
mod metrics;
mod synth;

pub use bench::{
    misleading_schedules, run_benchmark, AblationFlags, Aggregates, BenchmarkReport, ProtocolKind, SampleRow,
    TimingReport, NOC_THRESHOLDS,
};
pub use dataset::{ingest_dataset, Dataset, DatasetItem};
pub use latency::{measure_latency, median, LatencyProfile, TIMED_RUNS, WARMUP_RUNS};
pub use metrics::{clicks_to_reach, iou, noc_at_iou, timing_average, timing_total, TimingRecord};
pub use synth::{generate_synthetic_dataset, synth_scene, SynthScene, VAL_EVERY};
