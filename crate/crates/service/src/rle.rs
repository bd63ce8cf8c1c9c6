//! Run-length encoding of binary masks.
//!
//! Runs follow row-major order and alternate background and foreground,
//! starting with background (a leading zero run when the first pixel is set).

use fdrn_core::BinaryMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("run lengths sum to {sum}, expected {expected}")]
    LengthMismatch { sum: usize, expected: usize },
    #[error("mask dimensions must be positive")]
    EmptyFrame,
}

pub fn encode(mask: &BinaryMask) -> Rle {
    let (height, width) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &v in mask.data().iter() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle { width, height, counts }
}

pub fn decode(rle: &Rle) -> Result<BinaryMask, RleError> {
    if rle.width == 0 || rle.height == 0 {
        return Err(RleError::EmptyFrame);
    }
    let expected = rle.width * rle.height;
    let sum: usize = rle.counts.iter().sum();
    if sum != expected {
        return Err(RleError::LengthMismatch { sum, expected });
    }
    let mut bits = Vec::with_capacity(expected);
    for (k, &n) in rle.counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, n));
    }
    Ok(BinaryMask::from_fn(rle.height, rle.width, |(r, c)| bits[r * rle.width + c]))
}
