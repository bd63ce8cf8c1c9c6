use crate::geometry::RoiBox;
use crate::interaction::ClickHistory;
use crate::raster::BinaryMask;

/// Zoom-In box around the positive clicks and the previous mask.
///
/// Clicks and mask pixels count as unit squares. The tight box is scaled by
/// `expansion` about its center, each side is raised to `min_side`, and the
/// result is shifted (then clipped) to stay inside the image. Without any
/// positive click or foreground pixel the whole image is returned.
pub fn compute_roi(
    history: &ClickHistory,
    prev_mask: &BinaryMask,
    expansion: f64,
    min_side: f64,
    dims: (usize, usize),
) -> RoiBox {
    let mut tight = prev_mask.bounds();
    for c in history.positives() {
        let (t, l, b, r) = tight.unwrap_or((c.row, c.col, c.row + 1, c.col + 1));
        tight = Some((t.min(c.row), l.min(c.col), b.max(c.row + 1), r.max(c.col + 1)));
    }
    let Some((t, l, b, r)) = tight else {
        return RoiBox::full(dims.0, dims.1);
    };
    let (top, bottom) = expand_axis(t, b, expansion, min_side, dims.0);
    let (left, right) = expand_axis(l, r, expansion, min_side, dims.1);
    RoiBox::new(top, left, bottom, right)
}

fn expand_axis(lo: usize, hi: usize, expansion: f64, min_side: f64, len: usize) -> (usize, usize) {
    let center = (lo + hi) as f64 / 2.0;
    let side = ((hi - lo) as f64 * expansion).max(min_side).max(1.0);
    let mut start = (center - side / 2.0).floor();
    let extent = (side - 1e-9).ceil();
    let len_f = len as f64;
    if start + extent > len_f {
        start = len_f - extent;
    }
    let start = start.max(0.0);
    let end = (start + extent).min(len_f);
    (start as usize, end as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::{ClickPoint, Polarity};

    #[test]
    fn nothing_to_frame_gives_full_image() {
        let roi = compute_roi(&ClickHistory::new(), &BinaryMask::zeros(60, 80), 1.4, 40.0, (60, 80));
        assert_eq!(roi, RoiBox::full(60, 80));
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(5, 5, Polarity::Negative));
        assert_eq!(compute_roi(&h, &BinaryMask::zeros(60, 80), 1.4, 40.0, (60, 80)), RoiBox::full(60, 80));
    }

    #[test]
    fn single_click_gets_min_side_box() {
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(50, 50, Polarity::Positive));
        let roi = compute_roi(&h, &BinaryMask::zeros(100, 100), 1.4, 40.0, (100, 100));
        assert_eq!(roi, RoiBox::new(30, 30, 70, 70));
        // The click pixel [50, 51) sits at the box center.
        assert_eq!((roi.top + roi.bottom) as f64 / 2.0, 50.0);
    }

    #[test]
    fn tight_mask_box_without_expansion() {
        let m = BinaryMask::from_fn(40, 40, |(r, c)| (10..20).contains(&r) && (10..20).contains(&c));
        assert_eq!(compute_roi(&ClickHistory::new(), &m, 1.0, 0.0, (40, 40)), RoiBox::new(10, 10, 20, 20));
    }

    #[test]
    fn boxes_are_shifted_inside_the_image() {
        let mut h = ClickHistory::new();
        h.push(ClickPoint::new(2, 97, Polarity::Positive));
        let roi = compute_roi(&h, &BinaryMask::zeros(100, 100), 1.4, 40.0, (100, 100));
        assert_eq!(roi, RoiBox::new(0, 60, 40, 100));
        let roi = compute_roi(&h, &BinaryMask::zeros(30, 100), 1.4, 40.0, (30, 100));
        assert_eq!((roi.top, roi.bottom), (0, 30));
    }
}
