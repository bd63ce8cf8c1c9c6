//! Dynamic-scale sampling, click synthesis, losses and the training loop.

mod losses;
mod sampling;
mod trainer;

pub use losses::{
    bce_loss, bnfl_loss, boundary_band, combined_loss, dilate, erode, masks_to_tensor, nfl_loss, LossTensors,
    LossTerms, LOSS_EPS,
};
pub use sampling::{build_train_sample, extend_history, sample_dynamic_roi, synthesize_train_clicks, RoiDraw, TrainSample};
pub use trainer::{build_batch, sub_rng, train, TrainRun, TrainSummary, Trainer};
