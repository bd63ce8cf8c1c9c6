//! Regions of interest and bilinear resampling.
//!
//! Every resampling in the pipeline (global resize, ROI Align of cached
//! features, local crops, head upsampling and pasting a crop back into the
//! source frame) is separable bilinear interpolation. The per-axis weights are
//! built once as dense matrices, so the tensor path is a pair of matmuls and
//! stays differentiable.
//!
//! Coordinates are continuous with pixel `k` covering `[k, k + 1)`.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open box in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl RoiBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self { top, left, bottom, right }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn is_empty(&self) -> bool {
        self.height() == 0 || self.width() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn contains_box(&self, other: &RoiBox) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom >= other.bottom
            && self.right >= other.right
    }

    /// Fails on empty boxes and boxes leaving a `height x width` frame.
    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::DegenerateRoi(*self));
        }
        if self.bottom > height || self.right > width {
            return Err(Error::Invalid(format!(
                "roi {self:?} exceeds the {height}x{width} frame"
            )));
        }
        Ok(())
    }
}

/// Row-major `out x grid_len` bilinear weights.
///
/// Output bin `i` covers `[start + i * extent / out, start + (i + 1) * extent / out)`
/// in source pixels; `scale` is grid cells per source pixel. Bins spanning
/// more than one grid cell average `ceil(cells)` evenly spaced samples.
pub fn interp_matrix(start: f64, extent: f64, out: usize, scale: f64, grid_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * grid_len];
    let bin = extent / out as f64;
    let samples = ((bin * scale - 1e-6).ceil() as usize).max(1);
    let last = (grid_len - 1) as f64;
    for i in 0..out {
        let row = &mut m[i * grid_len..(i + 1) * grid_len];
        for s in 0..samples {
            let y = start + (i as f64 + (s as f64 + 0.5) / samples as f64) * bin;
            let u = (y * scale - 0.5).clamp(0.0, last);
            let i0 = u.floor() as usize;
            let frac = u - i0 as f64;
            row[i0] += (1.0 - frac) / samples as f64;
            if frac > 0.0 {
                row[i0 + 1] += frac / samples as f64;
            }
        }
    }
    m
}

/// Weights sampling a `grid_h x grid_w` grid that spans a `source` frame over `roi`.
struct RoiWeights {
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl RoiWeights {
    fn new(roi: &RoiBox, source: (usize, usize), grid: (usize, usize), out: (usize, usize)) -> Self {
        let sy = grid.0 as f64 / source.0 as f64;
        let sx = grid.1 as f64 / source.1 as f64;
        Self {
            rows: interp_matrix(roi.top as f64, roi.height() as f64, out.0, sy, grid.0),
            cols: interp_matrix(roi.left as f64, roi.width() as f64, out.1, sx, grid.1),
        }
    }
}

/// Bilinear ROI Align over a batch of feature grids.
///
/// `feature` is `(B, C, h, w)`; sample `i` covers a source frame of
/// `sources[i] = (H, W)` pixels, so each grid cell spans `H / h` source pixels
/// (the branch stride in source units). Returns `(B, C, out, out)`.
pub fn roi_align(feature: &Tensor, rois: &[RoiBox], sources: &[(usize, usize)], out: usize) -> Result<Tensor> {
    let (b, _c, h, w) = feature.dims4()?;
    if rois.len() != b || sources.len() != b {
        return Err(Error::Shape(format!(
            "{} rois and {} frames for a batch of {b}",
            rois.len(),
            sources.len()
        )));
    }
    if out == 0 {
        return Err(Error::Invalid("roi_align output size must be positive".into()));
    }
    let mut ry = Vec::with_capacity(b * out * h);
    let mut rx = Vec::with_capacity(b * w * out);
    for (roi, &source) in rois.iter().zip(sources) {
        roi.check_within(source.0, source.1)?;
        let wts = RoiWeights::new(roi, source, (h, w), (out, out));
        ry.extend_from_slice(&wts.rows);
        // (w, out) layout for the right-hand factor.
        for j in 0..w {
            for i in 0..out {
                rx.push(wts.cols[i * w + j]);
            }
        }
    }
    let dev = feature.device();
    let dtype = feature.dtype();
    let ry = Tensor::from_vec(ry, (b, 1, out, h), dev)?.to_dtype(dtype)?;
    let rx = Tensor::from_vec(rx, (b, 1, w, out), dev)?.to_dtype(dtype)?;
    Ok(ry.broadcast_matmul(&feature.contiguous()?.broadcast_matmul(&rx)?)?)
}

/// Bilinear resize of a `(B, C, h, w)` batch by the integer `factor`.
pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let uy = upsample_matrix(h, oh, x.device(), x.dtype())?;
    let ux = upsample_matrix(w, ow, x.device(), x.dtype())?.t()?;
    Ok(uy.broadcast_matmul(&x.contiguous()?.broadcast_matmul(&ux)?)?)
}

fn upsample_matrix(from: usize, to: usize, dev: &Device, dtype: DType) -> Result<Tensor> {
    let m = interp_matrix(0.0, to as f64, to, from as f64 / to as f64, from);
    Ok(Tensor::from_vec(m, (to, from), dev)?.to_dtype(dtype)?)
}

/// Crops `roi` out of a `(H, W, C)` array and resamples it to `out x out`.
pub fn crop_resize3(src: &Array3<f32>, roi: &RoiBox, out: usize) -> Result<Array3<f32>> {
    let (h, w, c) = src.dim();
    roi.check_within(h, w)?;
    let wts = RoiWeights::new(roi, (h, w), (h, w), (out, out));
    let mut dst = Array3::zeros((out, out, c));
    // Rows first: (out, W, C), then columns.
    let mut tmp = vec![0.0f64; out * w * c];
    for i in 0..out {
        let row = &wts.rows[i * h..(i + 1) * h];
        for (y, &wy) in row.iter().enumerate().filter(|(_, wy)| **wy != 0.0) {
            for x in 0..w {
                for ch in 0..c {
                    tmp[(i * w + x) * c + ch] += wy * src[[y, x, ch]] as f64;
                }
            }
        }
    }
    for i in 0..out {
        for j in 0..out {
            let col = &wts.cols[j * w..(j + 1) * w];
            for ch in 0..c {
                let v: f64 = col
                    .iter()
                    .enumerate()
                    .filter(|(_, wx)| **wx != 0.0)
                    .map(|(x, wx)| wx * tmp[(i * w + x) * c + ch])
                    .sum();
                dst[[i, j, ch]] = v as f32;
            }
        }
    }
    Ok(dst)
}

/// Single-channel variant of [`crop_resize3`].
pub fn crop_resize(src: &Array2<f32>, roi: &RoiBox, out: usize) -> Result<Array2<f32>> {
    let (h, w) = src.dim();
    let src3 = src.view().into_shape_with_order((h, w, 1)).map_err(|e| Error::Shape(e.to_string()))?;
    let dst = crop_resize3(&src3.to_owned(), roi, out)?;
    dst.into_shape_with_order((out, out)).map_err(|e| Error::Shape(e.to_string()))
}

/// Writes a square `crop` (covering `roi`) back into `dst` inside `roi` only.
pub fn paste(dst: &mut Array2<f32>, crop: &Array2<f32>, roi: &RoiBox) -> Result<()> {
    let (h, w) = dst.dim();
    roi.check_within(h, w)?;
    let (ch, cw) = crop.dim();
    let (rh, rw) = (roi.height(), roi.width());
    let rows = interp_matrix(0.0, rh as f64, rh, ch as f64 / rh as f64, ch);
    let cols = interp_matrix(0.0, rw as f64, rw, cw as f64 / rw as f64, cw);
    for i in 0..rh {
        let wy = &rows[i * ch..(i + 1) * ch];
        for j in 0..rw {
            let wx = &cols[j * cw..(j + 1) * cw];
            let mut v = 0.0f64;
            for (y, &a) in wy.iter().enumerate().filter(|(_, a)| **a != 0.0) {
                for (x, &b) in wx.iter().enumerate().filter(|(_, b)| **b != 0.0) {
                    v += a * b * crop[[y, x]] as f64;
                }
            }
            dst[[roi.top + i, roi.left + j]] = v as f32;
        }
    }
    Ok(())
}
