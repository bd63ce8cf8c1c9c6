//! Fusion of cached image features into the guidance features.

use candle_core::Tensor;

use super::layers::{Conv, ResBlock, Scope};
use crate::config::AttentionNorm;
use crate::error::{Error, Result};

/// Normalizes a batch of `(B, n, n)` affinities.
///
/// `Column` normalizes over the first index, so `A[.., j, k]` summed over `j`
/// is one for every `k`.
pub fn normalize_affinity(w: &Tensor, norm: AttentionNorm) -> Result<Tensor> {
    let dim = match norm {
        AttentionNorm::Column => 1,
        AttentionNorm::Row => 2,
    };
    Ok(candle_nn::ops::softmax(w, dim)?)
}

/// `(B, C, h, w)` to `(B, hw, C)`.
fn tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Affinity `W = K Q^T` between two `(B, ck, h, w)` crops.
pub fn affinity(k: &Tensor, q: &Tensor) -> Result<Tensor> {
    if k.dims() != q.dims() {
        return Err(Error::Shape(format!("key {:?} and query {:?} differ", k.dims(), q.dims())));
    }
    let (k, q) = (tokens(k)?, tokens(q)?);
    Ok(k.matmul(&q.t()?)?)
}

/// Non-local fusion of the two high-level feature views into `g_high`.
#[derive(Debug, Clone)]
pub struct SemanticIntegration {
    pub value: Conv,
    pub fuse: ResBlock,
    norm: AttentionNorm,
}

impl SemanticIntegration {
    pub fn new(s: &mut Scope, channels: usize, norm: AttentionNorm) -> Result<Self> {
        Ok(Self {
            value: Conv::new(&mut s.sub("value"), channels, channels, 3, 1)?,
            fuse: ResBlock::new(&mut s.sub("fuse"), 2 * channels, channels)?,
            norm,
        })
    }

    /// Mixed values `X = A V` before fusion, `(B, C, h, w)`.
    pub fn attend(&self, f_high1: &Tensor, f_high2: &Tensor, g_high: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = g_high.dims4()?;
        let (kh, kw) = (f_high1.dim(2)?, f_high1.dim(3)?);
        if (kh, kw) != (h, w) {
            return Err(Error::Shape(format!("feature crop {kh}x{kw} vs guidance {h}x{w}")));
        }
        let a = normalize_affinity(&affinity(f_high1, f_high2)?, self.norm)?;
        let v = tokens(&self.value.forward(g_high)?)?;
        Ok(a.matmul(&v)?.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    pub fn forward(&self, f_high1: &Tensor, f_high2: &Tensor, g_high: &Tensor) -> Result<Tensor> {
        let x = self.attend(f_high1, f_high2, g_high)?;
        self.fuse.forward(&Tensor::cat(&[&x, g_high], 1)?)
    }
}

/// Concatenation of low-level (and optional mid-level) crops with `g_low`.
#[derive(Debug, Clone)]
pub struct TextureIntegration {
    pub fuse: ResBlock,
}

impl TextureIntegration {
    pub fn new(s: &mut Scope, guide_channels: usize, feature_channels: usize) -> Result<Self> {
        Ok(Self { fuse: ResBlock::new(&mut s.sub("fuse"), guide_channels + feature_channels, guide_channels)? })
    }

    /// Starts out returning `g_low` unchanged.
    pub fn passthrough(s: &mut Scope, guide_channels: usize, feature_channels: usize) -> Result<Self> {
        Ok(Self { fuse: ResBlock::passthrough(&mut s.sub("fuse"), guide_channels + feature_channels, guide_channels)? })
    }

    pub fn forward(&self, g_low: &Tensor, f_low: &Tensor, f_mid: Option<&Tensor>) -> Result<Tensor> {
        let mut parts = vec![g_low, f_low];
        parts.extend(f_mid);
        let spatial = |t: &Tensor| -> Result<(usize, usize)> { Ok((t.dim(2)?, t.dim(3)?)) };
        for p in &parts[1..] {
            if spatial(p)? != spatial(g_low)? {
                return Err(Error::Shape(format!("feature crop {:?} vs guidance {:?}", p.dims(), g_low.dims())));
            }
        }
        self.fuse.forward(&Tensor::cat(&parts, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;
    use crate::model::layers::ParamStore;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn hand_set_two_by_two_matches_exp_oracle() {
        // Four tokens with two key/query channels.
        let k = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 2.0]];
        let q = [[0.2, -0.3], [1.5, 0.0], [0.0, 0.0], [0.7, 0.7]];
        let to_grid = |m: [[f64; 2]; 4]| {
            let chw: Vec<f64> = (0..2).flat_map(|c| (0..4).map(move |t| m[t][c])).collect();
            Tensor::from_vec(chw, (1, 2, 2, 2), &Device::Cpu).unwrap()
        };
        let a = normalize_affinity(&affinity(&to_grid(k), &to_grid(q)).unwrap(), AttentionNorm::Column).unwrap();
        let a = vals(&a);
        for col in 0..4 {
            let w: Vec<f64> = (0..4).map(|j| k[j][0] * q[col][0] + k[j][1] * q[col][1]).collect();
            let z: f64 = w.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                assert!((a[j * 4 + col] - w[j].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn row_norm_rows_sum_to_one() {
        let w = rand_tensor(&[2, 5, 5], 1);
        let a = normalize_affinity(&w, AttentionNorm::Row).unwrap();
        for s in vals(&a.sum(2).unwrap()) {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attention_is_the_value_conv() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let si = SemanticIntegration::new(&mut ps.root(), 4, AttentionNorm::Column).unwrap();
        let g = rand_tensor(&[1, 4, 1, 1], 2);
        let x = si.attend(&rand_tensor(&[1, 3, 1, 1], 3), &rand_tensor(&[1, 3, 1, 1], 4), &g).unwrap();
        assert_eq!(vals(&x), vals(&si.value.forward(&g).unwrap()));
    }

    #[test]
    fn mismatched_crops_are_rejected() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let si = SemanticIntegration::new(&mut ps.root(), 4, AttentionNorm::Column).unwrap();
        let g = rand_tensor(&[1, 4, 2, 2], 2);
        assert!(matches!(
            si.forward(&rand_tensor(&[1, 3, 2, 2], 3), &rand_tensor(&[1, 3, 1, 4], 4), &g),
            Err(Error::Shape(_))
        ));
        let ti = TextureIntegration::new(&mut ps.root().sub("t"), 4, 2).unwrap();
        assert!(matches!(ti.forward(&g, &rand_tensor(&[1, 2, 3, 3], 1), None), Err(Error::Shape(_))));
    }

    #[test]
    fn passthrough_texture_returns_guidance_for_zero_features() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let ti = TextureIntegration::passthrough(&mut ps.root(), 4, 6).unwrap();
        let g = rand_tensor(&[2, 4, 5, 5], 9);
        let out = ti.forward(&g, &Tensor::zeros((2, 6, 5, 5), DType::F64, &Device::Cpu).unwrap(), None).unwrap();
        for (a, b) in vals(&out).iter().zip(vals(&g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn texture_output_keeps_guidance_width() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        for (cg, cf, cm) in [(4, 4, 0), (8, 4, 6), (2, 16, 0)] {
            let ti = TextureIntegration::new(&mut ps.root().sub(&format!("t{cg}{cf}{cm}")), cg, cf + cm).unwrap();
            let mid = (cm > 0).then(|| rand_tensor(&[1, cm, 4, 4], 3));
            let out = ti.forward(&rand_tensor(&[1, cg, 4, 4], 1), &rand_tensor(&[1, cf, 4, 4], 2), mid.as_ref()).unwrap();
            assert_eq!(out.dims(), &[1, cg, 4, 4]);
        }
    }
}
