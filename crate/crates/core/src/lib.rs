//! Two-stage interactive segmentation with cached image features.
//!
//! Stage 1 extracts stratified image features once per image; stage 2
//! refines a mask from each new click, reusing the cached features.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod interaction;
pub mod model;
pub mod raster;
pub mod training;

pub use config::{AttentionNorm, ClickPlacement, FdrnConfig, InteractionConfig, LossMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::RoiBox;
pub use interaction::{ClickHistory, ClickPoint, Polarity, SessionState};
pub use model::{FdrnModel, FeatureBundle, GuidanceInput};
pub use raster::{BinaryMask, ImageTensor, ProbMask};

pub use candle_core::{DType, Device};
