//! Corrective click simulation.

use std::collections::VecDeque;

use crate::config::ClickPlacement;
use crate::error::{Error, Result};
use crate::interaction::{ClickPoint, Polarity};
use crate::raster::BinaryMask;

/// A 4-connected set of pixels, listed in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

/// 4-connected components of `mask`, ordered by their first row-major pixel.
pub fn components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for (r, c) in mask.foreground() {
        if seen[r * w + c] {
            continue;
        }
        seen[r * w + c] = true;
        let mut pixels = vec![];
        let mut queue = VecDeque::from([(r, c)]);
        while let Some((y, x)) = queue.pop_front() {
            pixels.push((y, x));
            let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for (ny, nx) in nbrs {
                if ny < h && nx < w && mask.get(ny, nx) && !seen[ny * w + nx] {
                    seen[ny * w + nx] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// Exact squared Euclidean distance from each `inside` pixel to the nearest
/// pixel that is not inside; everything beyond the frame counts as outside.
pub fn squared_distance_transform(inside: &BinaryMask) -> Vec<u64> {
    let (h, w) = inside.dims();
    let (ph, pw) = (h + 2, w + 2);
    const INF: u64 = u64::MAX / 4;
    let mut g = vec![0u64; ph * pw];
    for (r, c) in inside.foreground() {
        g[(r + 1) * pw + c + 1] = INF;
    }
    // Columns, then rows (Felzenszwalb & Huttenlocher lower envelope).
    let mut col = vec![0u64; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = g[y * pw + x];
        }
        let d = edt_1d(&col);
        for y in 0..ph {
            g[y * pw + x] = d[y];
        }
    }
    let mut out = vec![0u64; h * w];
    for y in 1..=h {
        let d = edt_1d(&g[y * pw..(y + 1) * pw]);
        out[(y - 1) * w..y * w].copy_from_slice(&d[1..=w]);
    }
    out
}

fn edt_1d(f: &[u64]) -> Vec<u64> {
    const INF: u64 = u64::MAX / 4;
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q] < INF).collect();
    if finite.is_empty() {
        return vec![INF; n];
    }
    // Parabola intersections in exact rational arithmetic: s = num / den.
    let inter = |q: usize, p: usize| -> (i128, i128) {
        let num = (f[q] as i128 + (q * q) as i128) - (f[p] as i128 + (p * p) as i128);
        (num, 2 * (q as i128 - p as i128))
    };
    let mut v: Vec<usize> = vec![finite[0]];
    let mut z: Vec<(i128, i128)> = vec![];
    for &q in &finite[1..] {
        loop {
            let p = *v.last().unwrap();
            let s = inter(q, p);
            // Drop p while the new intersection lies at or before the previous one.
            if let Some(&prev) = z.last() {
                if s.0 * prev.1 <= prev.0 * s.1 {
                    v.pop();
                    z.pop();
                    continue;
                }
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    let mut out = vec![0u64; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < z.len() && z[k].0 < q as i128 * z[k].1 {
            k += 1;
        }
        let p = v[k];
        let d = q as i128 - p as i128;
        *o = (d * d) as u64 + f[p];
    }
    out
}

/// Next corrective click for `pred` against `gt`, or `None` when they agree.
///
/// The largest 4-connected false-negative or false-positive region is chosen
/// (ties go to the region whose first pixel comes first in row-major order).
/// The click goes to the region pixel farthest from the region's boundary,
/// ties again broken row-major; it is positive for a false-negative region.
pub fn simulate_next_click(pred: &BinaryMask, gt: &BinaryMask, placement: ClickPlacement) -> Result<Option<ClickPoint>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (h, w) = gt.dims();
    let fn_mask = BinaryMask::from_fn(h, w, |(r, c)| gt.get(r, c) && !pred.get(r, c));
    let fp_mask = BinaryMask::from_fn(h, w, |(r, c)| pred.get(r, c) && !gt.get(r, c));
    let mut best: Option<(Component, Polarity)> = None;
    for (mask, pol) in [(&fn_mask, Polarity::Positive), (&fp_mask, Polarity::Negative)] {
        for comp in components(mask) {
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    comp.pixels.len() > b.pixels.len() || (comp.pixels.len() == b.pixels.len() && comp.pixels[0] < b.pixels[0])
                }
            };
            if better {
                best = Some((comp, pol));
            }
        }
    }
    let Some((comp, polarity)) = best else { return Ok(None) };
    let (row, col) = match placement {
        ClickPlacement::MaxDistance => interior_point(&comp, h, w),
        ClickPlacement::Centroid => centroid_point(&comp),
    };
    Ok(Some(ClickPoint::new(row, col, polarity)))
}

fn interior_point(comp: &Component, h: usize, w: usize) -> (usize, usize) {
    if comp.pixels.len() == 1 {
        return comp.pixels[0];
    }
    let mut inside = BinaryMask::zeros(h, w);
    for &(r, c) in &comp.pixels {
        inside.set(r, c, true);
    }
    let dt = squared_distance_transform(&inside);
    // Pixels are row-major, so the first maximum wins ties.
    let mut best = comp.pixels[0];
    for &(r, c) in &comp.pixels {
        if dt[r * w + c] > dt[best.0 * w + best.1] {
            best = (r, c);
        }
    }
    best
}

/// The component pixel nearest to its mean position.
fn centroid_point(comp: &Component) -> (usize, usize) {
    let n = comp.pixels.len() as f64;
    let my = comp.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mx = comp.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let d = |p: &(usize, usize)| (p.0 as f64 - my).powi(2) + (p.1 as f64 - mx).powi(2);
    let mut best = comp.pixels[0];
    for p in &comp.pixels {
        if d(p) < d(&best) {
            best = *p;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, lo: usize, hi: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |(r, c)| (lo..=hi).contains(&r) && (lo..=hi).contains(&c))
    }

    #[test]
    fn agreement_gives_no_click() {
        let m = square(11, 2, 6);
        assert_eq!(simulate_next_click(&m, &m, ClickPlacement::MaxDistance).unwrap(), None);
    }

    #[test]
    fn first_click_lands_in_gt_center() {
        let c = simulate_next_click(&BinaryMask::zeros(11, 11), &square(11, 2, 6), ClickPlacement::MaxDistance)
            .unwrap()
            .unwrap();
        assert_eq!((c.row, c.col, c.polarity), (4, 4, Polarity::Positive));
    }

    #[test]
    fn false_positive_block_gets_negative_center_click() {
        let c = simulate_next_click(&square(11, 3, 5), &BinaryMask::zeros(11, 11), ClickPlacement::MaxDistance)
            .unwrap()
            .unwrap();
        assert_eq!((c.row, c.col, c.polarity), (4, 4, Polarity::Negative));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(simulate_next_click(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 5), ClickPlacement::MaxDistance).is_err());
    }

    #[test]
    fn centroid_placement_stays_in_component() {
        // An L shape whose mean lies outside it.
        let m = BinaryMask::from_fn(10, 10, |(r, c)| (r == 8 && c <= 8) || (c == 0 && r <= 8));
        let c = simulate_next_click(&BinaryMask::zeros(10, 10), &m, ClickPlacement::Centroid).unwrap().unwrap();
        assert!(m.get(c.row, c.col));
    }

    #[test]
    fn distance_transform_counts_frame_as_outside() {
        let full = BinaryMask::from_fn(5, 5, |_| true);
        let d = squared_distance_transform(&full);
        assert_eq!(d[0], 1);
        assert_eq!(d[2 * 5 + 2], 9);
        assert_eq!(d[5 + 2], 4);
    }

    #[test]
    fn components_are_four_connected() {
        let m = BinaryMask::from_fn(4, 4, |(r, c)| r == c);
        assert_eq!(components(&m).len(), 4);
    }
}
