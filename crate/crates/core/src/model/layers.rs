//! Parameter storage and the small set of layers the network is built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{GroupNorm, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

enum Init {
    Uniform(f64),
    Const(f64),
    Values(Vec<f64>),
}

/// Named trainable parameters with seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), device: device.clone(), dtype, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// All variables whose name starts with `prefix`.
    pub fn vars_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..bound)).collect(),
            Init::Const(v) => vec![v; n],
            Init::Values(v) => {
                assert_eq!(v.len(), n, "initial values for {name} do not match {shape:?}");
                v
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        assert!(self.vars.insert(name.clone(), var).is_none(), "duplicate parameter {name}");
        Ok(out)
    }
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: &mut *self.store, prefix }
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.create(full, shape, init)
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> Result<Tensor> {
        self.param(name, &[1], Init::Const(value))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// He-uniform initialized `k x k` convolution with "same" padding.
    pub fn new(s: &mut Scope, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let weight = s.param("weight", &[cout, cin, k, k], Init::Uniform(bound))?;
        let bias = s.param("bias", &[cout], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let k = weight.dim(2)?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    /// Same as [`Conv::new`] but with all weights zero.
    pub fn zeroed(s: &mut Scope, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = s.param("weight", &[cout, cin, k, k], Init::Const(0.0))?;
        let bias = s.param("bias", &[cout], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

fn group_norm(s: &mut Scope, channels: usize, groups: usize) -> Result<GroupNorm> {
    let weight = s.param("weight", &[channels], Init::Const(1.0))?;
    let bias = s.param("bias", &[channels], Init::Const(0.0))?;
    Ok(GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
}

pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Convolution, group normalization and SiLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(&mut s.sub("conv"), cin, cout, k, stride)?, norm: group_norm(&mut s.sub("norm"), cout, groups)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        act(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

/// Backbone residual block keeping width and resolution.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    first: ConvNormAct,
    second: Conv,
    norm: GroupNorm,
}

impl BasicBlock {
    pub fn new(s: &mut Scope, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            first: ConvNormAct::new(&mut s.sub("conv1"), channels, channels, 3, 1, groups)?,
            second: Conv::new(&mut s.sub("conv2"), channels, channels, 3, 1)?,
            norm: group_norm(&mut s.sub("norm2"), channels, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.second.forward(&self.first.forward(x)?)?)?;
        act(&(y + x)?)
    }
}

/// Two 3x3 convolutions plus a 1x1-projected skip, mapping `cin` to `cout` channels.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Conv,
}

impl ResBlock {
    pub fn new(s: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(&mut s.sub("conv1"), cin, cout, 3, 1)?,
            conv2: Conv::new(&mut s.sub("conv2"), cout, cout, 3, 1)?,
            skip: Conv::new(&mut s.sub("skip"), cin, cout, 1, 1)?,
        })
    }

    /// Starts as a projection onto the first `cout` input channels: the 1x1
    /// skip is `[I | 0]` and the second convolution is zero.
    pub fn passthrough(s: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        assert!(cin >= cout);
        let eye: Vec<f64> = (0..cout * cin).map(|k| if k / cin == k % cin { 1.0 } else { 0.0 }).collect();
        let mut sk = s.sub("skip");
        let skip = Conv {
            weight: sk.param("weight", &[cout, cin, 1, 1], Init::Values(eye))?,
            bias: sk.param("bias", &[cout], Init::Const(0.0))?,
            stride: 1,
            padding: 0,
        };
        Ok(Self {
            conv1: Conv::new(&mut s.sub("conv1"), cin, cout, 3, 1)?,
            conv2: Conv::zeroed(&mut s.sub("conv2"), cout, cout, 3, 1)?,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&act(&self.conv1.forward(x)?)?)?;
        Ok((y + self.skip.forward(x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut ps = ParamStore::new(seed, DType::F32, &Device::Cpu);
            Conv::new(&mut ps.root().sub("c"), 3, 4, 3, 1).unwrap();
            ps.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn scoped_names() {
        let mut ps = ParamStore::new(0, DType::F32, &Device::Cpu);
        ResBlock::new(&mut ps.root().sub("a").sub("res"), 4, 2).unwrap();
        let names: Vec<_> = ps.vars().keys().cloned().collect();
        assert!(names.contains(&"a.res.conv1.weight".to_string()));
        assert!(names.contains(&"a.res.skip.bias".to_string()));
        assert_eq!(ps.vars_under("a.res.conv2").len(), 2);
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut ps = ParamStore::new(0, DType::F32, &Device::Cpu);
        let c = Conv::new(&mut ps.root(), 3, 5, 3, 2).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 8, 8]);
    }
}
