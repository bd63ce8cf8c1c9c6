use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fdrn_core::eval::{generate_synthetic_dataset, ingest_dataset, measure_latency, run_benchmark, synth_scene, Dataset, DatasetItem, ProtocolKind};
use fdrn_core::training::{train, TrainRun, Trainer};
use fdrn_core::{checkpoint, config::content_hash, Device, FdrnConfig};
use fdrn_service::{AppState, ServiceConfig};

/// Interactive segmentation with cached image features.
#[derive(Parser)]
#[command(name = "fdrn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to train on; defaults to `train` when the manifest has one.
        #[arg(long)]
        split: Option<String>,
        /// Wall-clock budget in seconds.
        #[arg(long)]
        time_budget: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Keep a checkpoint for every epoch.
        #[arg(long)]
        every_epoch: bool,
    },
    /// Run the NoC benchmark and write report.json, report.csv and timing.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "standard")]
        protocol: ProtocolKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Split to evaluate; defaults to `val` when the manifest has one.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        max_clicks: Option<usize>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        canvas: usize,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Idle session lifetime in seconds.
        #[arg(long, default_value_t = 1800)]
        ttl: u64,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Time cached and recomputed sessions of a fixed click count.
    BenchTiming {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        clicks: usize,
        /// Take the first item of this dataset instead of a synthetic scene.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip the recompute-every-click comparison.
        #[arg(long)]
        no_monolithic: bool,
    },
}

fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("FDRN_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("FDRN_THREADS={v}"))?;
            if n == 0 {
                bail!("FDRN_THREADS must be positive");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn pick_split(ds: &Dataset, wanted: Option<&str>, default: &str) -> anyhow::Result<Vec<DatasetItem>> {
    let items = match wanted {
        Some(s) => ds.split(s),
        None if ds.items.iter().any(|i| i.split == default) => ds.split(default),
        None => ds.items.clone(),
    };
    if items.is_empty() {
        bail!("no items in split {}", wanted.unwrap_or(default));
    }
    Ok(items)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = thread_cap()?;
    if let Some(n) = threads {
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let device = Device::Cpu;
    match Cli::parse().command {
        Command::Train { config, data, out, split, time_budget, max_steps, every_epoch } => {
            let cfg = FdrnConfig::load(&config)?;
            let ds = ingest_dataset(&data)?;
            let items = pick_split(&ds, split.as_deref(), "train")?;
            log::info!("training on {} instances ({} skipped)", items.len(), ds.skipped.len());
            let mut trainer = Trainer::new(cfg, &device)?;
            let run = TrainRun { time_budget: time_budget.map(Duration::from_secs), max_steps, checkpoint_every_epoch: every_epoch };
            let summary = train(&mut trainer, &items, &out, &run)?;
            println!(
                "{} steps, {} epochs, final loss {:.4}{}",
                summary.steps,
                summary.epochs_completed,
                summary.last.total,
                if summary.stopped_early { " (stopped early)" } else { "" }
            );
            println!("checkpoint: {}", out.join("last.safetensors").display());
        }
        Command::Eval { checkpoint, data, protocol, seed, report, split, max_clicks } => {
            let bytes = std::fs::read(&checkpoint)?;
            let (model, mut cfg) = checkpoint::from_bytes(&bytes, &device)?;
            if let Some(m) = max_clicks {
                cfg.interaction.max_clicks = m;
            }
            let ds = ingest_dataset(&data)?;
            let items = pick_split(&ds, split.as_deref(), "val")?;
            let (rep, timing) = run_benchmark(&items, &model, &cfg, protocol, seed, Some(content_hash(&bytes)))?;
            rep.write(&timing, &report)?;
            let a = &rep.aggregates;
            println!(
                "{} samples: NoC@80 {:.2}  NoC@85 {:.2}  NoC@90 {:.2}  final IoU {:.3}",
                a.samples, a.noc80, a.noc85, a.noc90, a.mean_final_iou
            );
            println!("t_f1 {:.2} ms, t_f2 {:.2} ms, {:.2} clicks", timing.mean.t_f1, timing.mean.t_f2, timing.mean.n_click);
        }
        Command::Synth { seed, n, out, canvas } => {
            let counts = generate_synthetic_dataset(seed, n, canvas, &out)?;
            println!("{} images, {} instances in {}", counts.len(), counts.iter().sum::<usize>(), out.display());
        }
        Command::Serve { checkpoint, port, host, ttl, static_dir } => {
            let (model, cfg) = checkpoint::load(&checkpoint, &device)?;
            let mut config = ServiceConfig { ttl: Duration::from_secs(ttl), ..Default::default() };
            if let Some(dir) = static_dir {
                config.static_dir = Some(dir);
            }
            let state = AppState::new(Arc::new(model), cfg.interaction, config);
            let mut rt = tokio::runtime::Builder::new_multi_thread();
            if let Some(n) = threads {
                rt.worker_threads(n).max_blocking_threads(n);
            }
            rt.enable_all().build()?.block_on(fdrn_service::serve(state, SocketAddr::new(host, port)))?;
        }
        Command::BenchTiming { checkpoint, clicks, data, no_monolithic } => {
            if clicks == 0 {
                bail!("--clicks must be positive");
            }
            let (model, cfg) = checkpoint::load(&checkpoint, &device)?;
            let (image, gt) = match data {
                Some(dir) => {
                    let ds = ingest_dataset(&dir)?;
                    let item = ds.items.first().context("empty dataset")?;
                    ((*item.image).clone(), item.mask.clone())
                }
                None => synth_scene(0, 0, 2 * cfg.model.global_size).pair(1)?,
            };
            let profile = measure_latency(&model, Arc::new(image), &gt, clicks, &cfg.interaction, !no_monolithic)?;
            println!("{}", serde_json::to_string_pretty(&profile)?);
        }
    }
    Ok(())
}
