//! Robustness protocol with deliberately bad clicks.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ClickPlacement;
use crate::error::Result;
use crate::interaction::{simulate_next_click, ClickPoint, Polarity};
use crate::raster::BinaryMask;

pub const MISLEADING_TOTAL_CLICKS: usize = 20;
pub const MISLEADING_BAD_CLICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MisleadingKind {
    /// A positive click inside the already predicted foreground.
    Repetitive,
    /// The corrective click with its polarity flipped.
    False,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisleadingSchedule {
    pub total_clicks: usize,
    /// 1-based click index to the kind of bad click placed there.
    pub bad: BTreeMap<usize, MisleadingKind>,
    pub seed: u64,
}

impl MisleadingSchedule {
    pub fn kind_at(&self, index: usize) -> Option<MisleadingKind> {
        self.bad.get(&index).copied()
    }

    pub fn effective_clicks(&self) -> usize {
        self.total_clicks - self.bad.len()
    }
}

/// Five distinct bad click indices out of twenty, each repetitive or false
/// with equal probability. Depends on nothing but `seed`.
pub fn make_misleading_schedule(seed: u64) -> MisleadingSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = sample(&mut rng, MISLEADING_TOTAL_CLICKS, MISLEADING_BAD_CLICKS)
        .into_iter()
        .map(|i| {
            let kind = if rng.random_bool(0.5) { MisleadingKind::Repetitive } else { MisleadingKind::False };
            (i + 1, kind)
        })
        .collect();
    MisleadingSchedule { total_clicks: MISLEADING_TOTAL_CLICKS, bad, seed }
}

/// The corrective click, or a positive click on the object center when the
/// prediction is already perfect.
pub fn effective_click(pred: &BinaryMask, gt: &BinaryMask, placement: ClickPlacement) -> Result<Option<ClickPoint>> {
    if let Some(c) = simulate_next_click(pred, gt, placement)? {
        return Ok(Some(c));
    }
    simulate_next_click(&BinaryMask::zeros(gt.dims().0, gt.dims().1), gt, placement)
}

pub fn apply_misleading_click(
    kind: MisleadingKind,
    pred: &BinaryMask,
    gt: &BinaryMask,
    rng: &mut impl Rng,
    placement: ClickPlacement,
) -> Result<Option<ClickPoint>> {
    match kind {
        MisleadingKind::Repetitive => {
            let fg = pred.foreground();
            if fg.is_empty() {
                return effective_click(pred, gt, placement);
            }
            let (row, col) = fg[rng.random_range(0..fg.len())];
            Ok(Some(ClickPoint::new(row, col, Polarity::Positive)))
        }
        MisleadingKind::False => Ok(effective_click(pred, gt, placement)?
            .map(|c| ClickPoint { polarity: c.polarity.inverted(), ..c })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_seeded_with_fifteen_effective_clicks() {
        for seed in 0..50 {
            let s = make_misleading_schedule(seed);
            assert_eq!(s, make_misleading_schedule(seed));
            assert_eq!(s.bad.len(), 5);
            assert_eq!(s.effective_clicks(), 15);
            assert!(s.bad.keys().all(|&i| (1..=20).contains(&i)));
        }
        assert_ne!(make_misleading_schedule(1), make_misleading_schedule(2));
    }

    #[test]
    fn repetitive_on_single_pixel() {
        let mut pred = BinaryMask::zeros(8, 8);
        pred.set(3, 3, true);
        let gt = BinaryMask::from_fn(8, 8, |(r, _)| r < 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = apply_misleading_click(MisleadingKind::Repetitive, &pred, &gt, &mut rng, ClickPlacement::MaxDistance)
            .unwrap()
            .unwrap();
        assert_eq!((c.row, c.col, c.polarity), (3, 3, Polarity::Positive));
    }

    #[test]
    fn false_click_flips_polarity() {
        let gt = BinaryMask::from_fn(11, 11, |(r, c)| (2..=6).contains(&r) && (2..=6).contains(&c));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = apply_misleading_click(MisleadingKind::False, &BinaryMask::zeros(11, 11), &gt, &mut rng, ClickPlacement::MaxDistance)
            .unwrap()
            .unwrap();
        assert_eq!((c.row, c.col, c.polarity), (4, 4, Polarity::Negative));
    }

    #[test]
    fn repetitive_on_empty_prediction_falls_back() {
        let gt = BinaryMask::from_fn(11, 11, |(r, c)| (2..=6).contains(&r) && (2..=6).contains(&c));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = BinaryMask::zeros(11, 11);
        let c = apply_misleading_click(MisleadingKind::Repetitive, &empty, &gt, &mut rng, ClickPlacement::MaxDistance).unwrap();
        assert_eq!(c, simulate_next_click(&empty, &gt, ClickPlacement::MaxDistance).unwrap());
    }
}
