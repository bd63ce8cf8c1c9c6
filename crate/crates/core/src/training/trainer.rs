//! End-to-end optimization of both stages.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::FdrnConfig;
use crate::error::{Error, Result};
use crate::eval::DatasetItem;
use crate::geometry::RoiBox;
use crate::interaction::ClickHistory;
use crate::model::{FdrnModel, GuidanceBatch, GuidanceInput};
use crate::raster::BinaryMask;
use crate::training::losses::{boundary_band, combined_loss, masks_to_tensor, LossTerms};
use crate::training::sampling::{build_train_sample, extend_history, synthesize_train_clicks, TrainSample};

/// Derives an independent stream for `(seed, a, b)`.
pub fn sub_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b);
    rng
}

pub struct Trainer {
    pub model: FdrnModel,
    pub config: FdrnConfig,
    opt: AdamW,
}

/// A batch with its click rounds resolved.
struct PreparedBatch {
    global: Tensor,
    dims: Vec<(usize, usize)>,
    crops: Tensor,
    rois: Vec<RoiBox>,
    gts: Vec<BinaryMask>,
}

impl Trainer {
    pub fn new(config: FdrnConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = FdrnModel::new(&config.model, config.train.seed, DType::F32, device)?;
        Self::with_model(model, config)
    }

    pub fn with_model(model: FdrnModel, config: FdrnConfig) -> Result<Self> {
        let t = &config.train;
        let vars = model.params().vars().values().cloned().collect();
        let opt = AdamW::new(
            vars,
            ParamsAdamW { lr: t.learning_rate, beta1: t.beta1, beta2: t.beta2, eps: 1e-8, weight_decay: 0.0 },
        )?;
        Ok(Self { model, config, opt })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    fn prepare(&self, batch: &[TrainSample]) -> Result<PreparedBatch> {
        let dev = self.model.device();
        let dtype = self.model.dtype();
        let stack = |arrs: Vec<&ndarray::Array3<f32>>| -> Result<Tensor> {
            let (h, w, _) = arrs[0].dim();
            let v: Vec<f32> = arrs.iter().flat_map(|a| a.view().permuted_axes([2, 0, 1]).iter().copied().collect::<Vec<_>>()).collect();
            Ok(Tensor::from_vec(v, (arrs.len(), 3, h, w), dev)?.to_dtype(dtype)?)
        };
        Ok(PreparedBatch {
            global: stack(batch.iter().map(|s| &s.global_image).collect())?,
            dims: batch.iter().map(|s| s.source_dims).collect(),
            crops: stack(batch.iter().map(|s| &s.local_crop).collect())?,
            rois: batch.iter().map(|s| s.roi).collect(),
            gts: batch.iter().map(|s| s.gt_local.clone()).collect(),
        })
    }

    /// Forward pass with synthesized clicks: probabilities `(B, 1, S, S)`
    /// and the local ground truth.
    ///
    /// Earlier interaction rounds run without gradient; the returned
    /// probabilities stay attached to both stages.
    fn forward(&self, batch: &[TrainSample], rng: &mut impl Rng) -> Result<(Tensor, Vec<BinaryMask>)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let mcfg = &self.config.model;
        let tcfg = &self.config.train;
        let s = mcfg.crop_size;
        let full = RoiBox::full(s, s);
        let b = self.prepare(batch)?;
        let n = batch.len();

        let mut histories = vec![ClickHistory::new(); n];
        let mut prev: Vec<Array2<f32>> = vec![Array2::zeros((s, s)); n];
        let mut rounds = Vec::with_capacity(n);
        for (i, gt) in b.gts.iter().enumerate() {
            let clicks = synthesize_train_clicks(gt, None, rng, 1, tcfg.max_initial_clicks, mcfg.click_radius)?;
            extend_history(&mut histories[i], &clicks);
            rounds.push(rng.random_range(1..=tcfg.max_iterative_rounds.max(1)));
        }
        let guidance = |h: &[ClickHistory], p: &[Array2<f32>]| -> Result<GuidanceBatch> {
            let inputs = h
                .iter()
                .zip(p)
                .map(|(h, p)| GuidanceInput::rasterize(h, p, &full, s, mcfg.click_radius))
                .collect::<Result<Vec<_>>>()?;
            GuidanceBatch::from_inputs(&inputs, self.model.device(), self.model.dtype())
        };

        let features = self.model.extract_stratified_features(&b.global, &b.dims)?;
        let max_round = rounds.iter().copied().max().unwrap_or(1);
        if max_round > 1 {
            let frozen = features.detach();
            for round in 2..=max_round {
                let g = guidance(&histories, &prev)?;
                let probs = self.model.predict_mask_step(&b.crops, &g, Some(&frozen), &b.rois)?.detach();
                let probs = to_arrays(&probs, s)?;
                for i in (0..n).filter(|&i| rounds[i] >= round) {
                    let pred = BinaryMask::new(probs[i].mapv(|v| v > 0.5));
                    let clicks = synthesize_train_clicks(&b.gts[i], Some(&pred), rng, round, 0, mcfg.click_radius)?;
                    extend_history(&mut histories[i], &clicks);
                    prev[i] = probs[i].clone();
                }
            }
        }
        let g = guidance(&histories, &prev)?;
        let probs = self.model.predict_mask_step(&b.crops, &g, Some(&features), &b.rois)?;
        Ok((probs, b.gts))
    }

    /// One optimizer update on `batch`; `rng` drives click synthesis.
    pub fn train_step(&mut self, batch: &[TrainSample], rng: &mut impl Rng) -> Result<LossTerms> {
        let (probs, gts) = self.forward(batch, rng)?;
        let tcfg = &self.config.train;
        let dev = self.model.device().clone();
        let gt_t = masks_to_tensor(&gts, &dev, self.model.dtype())?;
        let bands: Vec<BinaryMask> = gts.iter().map(|g| boundary_band(g, tcfg.boundary_radius)).collect();
        let band_t = masks_to_tensor(&bands, &dev, self.model.dtype())?;
        let loss = combined_loss(&probs, &gt_t, &band_t, tcfg)?;
        let terms = loss.values()?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "bce={} nfl={} bnfl={} total={} lr={}",
                terms.bce,
                terms.nfl,
                terms.bnfl,
                terms.total,
                self.learning_rate()
            )));
        }
        self.opt.backward_step(&loss.total)?;
        Ok(terms)
    }

    /// Crop-frame predictions and ground truth for `batch`, as in training.
    pub fn predict(&self, batch: &[TrainSample], rng: &mut impl Rng) -> Result<Vec<(BinaryMask, BinaryMask)>> {
        let (probs, gts) = self.forward(batch, rng)?;
        let s = self.config.model.crop_size;
        Ok(to_arrays(&probs.detach(), s)?.into_iter().map(|p| BinaryMask::new(p.mapv(|v| v > 0.5))).zip(gts).collect())
    }
}

fn to_arrays(probs: &Tensor, s: usize) -> Result<Vec<Array2<f32>>> {
    let v: Vec<f32> = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    v.chunks_exact(s * s)
        .map(|c| Array2::from_shape_vec((s, s), c.to_vec()).map_err(|e| Error::Shape(e.to_string())))
        .collect()
}

/// Builds the samples of one batch in parallel, each from its own stream.
pub fn build_batch(items: &[&DatasetItem], config: &FdrnConfig, epoch: usize, offset: usize) -> Result<Vec<TrainSample>> {
    items
        .par_iter()
        .enumerate()
        .map(|(k, item)| {
            let mut rng = sub_rng(config.train.seed, epoch as u64, (offset + k) as u64);
            build_train_sample(&item.image, &item.mask, &mut rng, &config.model, &config.train)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_completed: usize,
    pub last: LossTerms,
    pub stopped_early: bool,
}

/// Options for [`train`] beyond the configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    /// Stop after this much wall-clock time.
    pub time_budget: Option<Duration>,
    /// Stop after this many steps.
    pub max_steps: Option<usize>,
    /// Write per-epoch checkpoints.
    pub checkpoint_every_epoch: bool,
}

/// Trains on `items`, writing `loss_curve.csv` and checkpoints to `out`.
pub fn train(trainer: &mut Trainer, items: &[DatasetItem], out: &Path, run: &TrainRun) -> Result<TrainSummary> {
    if items.is_empty() {
        return Err(Error::Dataset("no training items".into()));
    }
    fs::create_dir_all(out)?;
    let mut curve = fs::File::create(out.join("loss_curve.csv"))?;
    writeln!(curve, "epoch,step,lr,total,bce,nfl,bnfl")?;
    let cfg = trainer.config.clone();
    let start = Instant::now();
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    'epochs: for epoch in 0..cfg.train.epochs {
        trainer.set_learning_rate(cfg.train.learning_rate_at(epoch));
        order.shuffle(&mut sub_rng(cfg.train.seed, u64::MAX, epoch as u64));
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch_items: Vec<&DatasetItem> = chunk.iter().map(|&i| &items[i]).collect();
            let batch = build_batch(&batch_items, &cfg, epoch, bi * cfg.train.batch_size)?;
            let mut rng = sub_rng(cfg.train.seed ^ 0x636c_6963_6b73, epoch as u64, bi as u64);
            let terms = trainer.train_step(&batch, &mut rng)?;
            summary.steps += 1;
            summary.last = terms;
            writeln!(
                curve,
                "{epoch},{},{},{},{},{},{}",
                summary.steps,
                trainer.learning_rate(),
                terms.total,
                terms.bce,
                terms.nfl,
                terms.bnfl
            )?;
            let out_of_time = run.time_budget.is_some_and(|b| start.elapsed() >= b);
            let out_of_steps = run.max_steps.is_some_and(|m| summary.steps >= m);
            if out_of_time || out_of_steps {
                summary.stopped_early = true;
                break 'epochs;
            }
        }
        summary.epochs_completed = epoch + 1;
        log::info!("epoch {epoch}: loss {:.4} after {} steps", summary.last.total, summary.steps);
        if run.checkpoint_every_epoch {
            checkpoint::save(&trainer.model, &cfg, out.join(format!("epoch_{epoch:03}.safetensors")))?;
        }
    }
    curve.flush()?;
    checkpoint::save(&trainer.model, &cfg, out.join("last.safetensors"))?;
    Ok(summary)
}
