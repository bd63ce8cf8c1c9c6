//! Shared fixtures for the criterion benchmarks.

use std::sync::Arc;

use fdrn_core::eval::synth_scene;
use fdrn_core::{BinaryMask, DType, Device, FdrnModel, ImageTensor, ModelConfig};

/// A seeded model with the given configuration.
pub fn model(cfg: &ModelConfig) -> FdrnModel {
    FdrnModel::new(cfg, 0, DType::F32, &Device::Cpu).expect("model")
}

/// A synthetic image of side `side` and the mask of its first object.
pub fn scene(side: usize) -> (Arc<ImageTensor>, BinaryMask) {
    let (image, mask) = synth_scene(0, 0, side).pair(1).expect("scene");
    (Arc::new(image), mask)
}
