//! Host-side images and masks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 32;

/// An RGB image with values in `[0, 1]`, stored `height x width x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Grayscale sources are repeated across the three channels.
    pub fn from_gray(gray: &Array2<f32>) -> Result<Self> {
        let (h, w) = gray.dim();
        Self::new(Array3::from_shape_fn((h, w, 3), |(y, x, _)| gray[[y, x]]))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        use image::ColorType::*;
        match img.color() {
            L8 | L16 | La8 | La16 => {
                let g = img.to_luma32f();
                let (w, h) = g.dimensions();
                let arr = Array2::from_shape_vec((h as usize, w as usize), g.into_raw())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Self::from_gray(&arr.mapv(|v| v.clamp(0.0, 1.0)))
            }
            _ => {
                let rgb = img.to_rgb32f();
                let (w, h) = rgb.dimensions();
                let arr = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Self::new(arr.mapv(|v| v.clamp(0.0, 1.0)))
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_dynamic(&image::open(path)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_dynamic(&image::load_from_memory(bytes)?)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (h, w) = self.dims();
        let chw: Vec<f32> = self.data.view().permuted_axes([2, 0, 1]).iter().copied().collect();
        Ok(Tensor::from_vec(chw, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }
}

/// A binary mask, `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<bool>,
}

impl BinaryMask {
    pub fn new(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array2::from_elem((height, width), false) }
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Self { data: Array2::from_shape_fn((height, width), f) }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[[row, col]] = value;
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.data.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect()
    }

    /// Half-open `(top, left, bottom, right)` bounds of the foreground.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for ((r, c), _) in self.data.indexed_iter().filter(|(_, &v)| v) {
            b = Some(match b {
                None => (r, c, r + 1, c + 1),
                Some((t, l, bo, ri)) => (t.min(r), l.min(c), bo.max(r + 1), ri.max(c + 1)),
            });
        }
        b
    }

    pub fn to_prob(&self) -> ProbMask {
        ProbMask::new(self.data.mapv(|v| if v { 1.0 } else { 0.0 }))
    }

    pub fn to_gray8(&self) -> GrayImage {
        let (h, w) = self.dims();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }
}

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    data: Array2<f32>,
    pub threshold: f32,
}

impl ProbMask {
    pub fn new(data: Array2<f32>) -> Self {
        Self { data, threshold: DEFAULT_THRESHOLD }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f32> {
        &mut self.data
    }

    pub fn binarize(&self) -> BinaryMask {
        BinaryMask::new(self.data.mapv(|p| p > self.threshold))
    }
}
