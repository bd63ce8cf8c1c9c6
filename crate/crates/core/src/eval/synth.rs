//! Procedural scenes of textured shapes over noisy backgrounds.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::raster::{BinaryMask, ImageTensor};

/// Every fifth sample goes to the validation split.
pub const VAL_EVERY: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: RgbImage,
    /// Instance ids, 0 is background.
    pub mask: GrayImage,
    pub instances: usize,
}

impl SynthScene {
    /// The image and the binary mask of instance `label` (1-based).
    pub fn pair(&self, label: u8) -> Result<(ImageTensor, BinaryMask)> {
        let image = ImageTensor::from_dynamic(&image::DynamicImage::ImageRgb8(self.image.clone()))?;
        let (w, h) = self.mask.dimensions();
        let mask = BinaryMask::from_fn(h as usize, w as usize, |(r, c)| self.mask.get_pixel(c as u32, r as u32).0[0] == label);
        Ok((image, mask))
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((yi, xi), (yj, xj)) = (pts[i], pts[j]);
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn far_color(rng: &mut ChaCha8Rng, from: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        let d: f64 = c.iter().zip(from).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d > 0.45 {
            return c;
        }
    }
}

/// One scene with 1 to 3 instances, each keeping a visible area.
pub fn synth_scene(seed: u64, index: u64, canvas: usize) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = canvas as f64;
    let bg = random_color(&mut rng);
    let (gy, gx) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let instances = rng.random_range(1..=3usize);
    let mut labels = vec![0u8; canvas * canvas];
    let mut colors = vec![bg; instances + 1];
    let mut textures = vec![(0.0, 0.0, 0.0); instances + 1];
    let min_area = (canvas * canvas) / 60;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < instances && attempts < 200 {
        attempts += 1;
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy: rng.random_range(0.2 * n..0.8 * n),
                cx: rng.random_range(0.2 * n..0.8 * n),
                ry: rng.random_range(0.08 * n..0.3 * n),
                rx: rng.random_range(0.08 * n..0.3 * n),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let (cy, cx) = (rng.random_range(0.25 * n..0.75 * n), rng.random_range(0.25 * n..0.75 * n));
            let k = rng.random_range(3..=7);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .iter()
                .map(|a| {
                    let r = rng.random_range(0.12 * n..0.32 * n);
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Shape::Polygon(pts)
        };
        let label = placed as u8 + 1;
        let mut trial = labels.clone();
        for y in 0..canvas {
            for x in 0..canvas {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    trial[y * canvas + x] = label;
                }
            }
        }
        let ok = (1..=label).all(|l| trial.iter().filter(|&&v| v == l).count() >= min_area);
        if ok {
            labels = trial;
            colors[label as usize] = far_color(&mut rng, bg);
            textures[label as usize] = (rng.random_range(0.1..0.5), rng.random_range(0.0..std::f64::consts::PI), rng.random_range(0.03..0.12));
            placed += 1;
        }
    }
    let mut image = RgbImage::new(canvas as u32, canvas as u32);
    let mut mask = GrayImage::new(canvas as u32, canvas as u32);
    for y in 0..canvas {
        for x in 0..canvas {
            let l = labels[y * canvas + x] as usize;
            let (fy, fx) = (y as f64 / n - 0.5, x as f64 / n - 0.5);
            let noise = rng.random_range(-0.08..0.08);
            let shade = if l == 0 {
                gy * fy + gx * fx
            } else {
                let (freq, phase, amp) = textures[l];
                amp * ((x as f64 * phase.cos() + y as f64 * phase.sin()) * freq).sin()
            };
            let px = colors[l].map(|c| ((c + shade + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            image.put_pixel(x as u32, y as u32, Rgb(px));
            mask.put_pixel(x as u32, y as u32, Luma([l as u8]));
        }
    }
    SynthScene { image, mask, instances: placed }
}

/// Writes `n_samples` scenes under `out` and returns the instance count of each.
pub fn generate_synthetic_dataset(seed: u64, n_samples: usize, canvas: usize, out: impl AsRef<Path>) -> Result<Vec<usize>> {
    let out = out.as_ref();
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let counts = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let scene = synth_scene(seed, i as u64, canvas);
            let id = format!("{i:05}");
            scene.image.save(out.join("images").join(format!("{id}.png")))?;
            scene.mask.save(out.join("masks").join(format!("{id}.png")))?;
            Ok(scene.instances)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = fs::File::create(out.join("manifest.tsv"))?;
    for i in 0..n_samples {
        let split = if i % VAL_EVERY == VAL_EVERY - 1 { "val" } else { "train" };
        writeln!(manifest, "{i:05}\t{split}")?;
    }
    Ok(counts)
}
