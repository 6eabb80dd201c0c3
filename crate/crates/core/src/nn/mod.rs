//! Parameter storage and the few layer types the models are assembled from.

mod conv;
mod fused;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Result, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::{Init, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

pub use conv::{conv2d as fast_conv2d, ConvGeometry};
pub use fused::{max_pool_2x2, max_pool_3x3_s2};

/// A named set of trainable tensors with seeded, order-independent initialization.
///
/// Every variable's initial value depends only on the store seed and the
/// variable's full name, so two stores built with the same seed are identical
/// regardless of construction order.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("vars", &self.len())
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn init_values(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f32> {
        let d = Normal::new(mean, std.max(f64::MIN_POSITIVE)).expect("finite normal parameters");
        (0..n).map(|_| d.sample(rng) as f32).collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f32> {
        if up <= lo {
            return vec![lo as f32; n];
        }
        let d = Uniform::new(lo, up).expect("valid uniform bounds");
        (0..n).map(|_| d.sample(rng) as f32).collect()
    };
    match init {
        Init::Const(v) => vec![v as f32; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming { dist, fan, non_linearity } => {
            let fan = fan.for_shape(shape).max(1) as f64;
            let std = non_linearity.gain() / fan.sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
            }
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: Arc::new(Mutex::new(BTreeMap::new())), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, Device::Cpu)
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.lock().expect("param store poisoned").values().cloned().collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let guard = self.vars.lock().expect("param store poisoned");
        guard.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over every variable's name, shape and raw f32 bytes, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Overwrites existing variables from `tensors`; every stored name must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.named_vars() {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                candle_core::bail!(
                    "shape mismatch for {key}: stored {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                );
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(self.seed);
        {
            let mut guard = copy.vars.lock().expect("param store poisoned");
            for (name, var) in self.named_vars() {
                guard.insert(name, Var::from_tensor(&var.as_tensor().copy()?)?);
            }
        }
        Ok(copy)
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut guard = self.vars.lock().expect("param store poisoned");
        if let Some(v) = guard.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", v.shape(), s);
            }
            return v.as_tensor().to_dtype(dtype);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let values = init_values(h, &s, &mut rng);
        let var = Var::from_vec(values, s, dev)?;
        let t = var.as_tensor().clone();
        guard.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> Result<Tensor> {
        let guard = self.vars.lock().expect("param store poisoned");
        match guard.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("param store poisoned").contains_key(name)
    }
}

const KAIMING_RELU: Init = Init::Kaiming {
    dist: NormalOrUniform::Normal,
    fan: FanInOut::FanIn,
    non_linearity: candle_nn::init::NonLinearity::ReLU,
};

/// Square-kernel convolution backed by [`fast_conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geometry: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        let weight = vb.get_with_hints((c_out, c_in, kernel, kernel), "weight", KAIMING_RELU)?;
        let bias = if bias {
            let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
            Some(vb.get_with_hints(c_out, "bias", Init::Uniform { lo: -bound, up: bound })?)
        } else {
            None
        };
        Ok(Self { weight, bias, geometry })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = fast_conv2d(xs, &self.weight, self.geometry)?;
        match &self.bias {
            Some(b) => ys.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(ys),
        }
    }
}

/// 3×3, stride 1, padding 1.
pub fn conv3x3(c_in: usize, c_out: usize, bias: bool, vb: VarBuilder) -> Result<Conv2d> {
    Conv2d::new(c_in, c_out, 3, ConvGeometry { stride: 1, padding: 1 }, bias, vb)
}

pub fn conv1x1(c_in: usize, c_out: usize, bias: bool, vb: VarBuilder) -> Result<Conv2d> {
    Conv2d::new(c_in, c_out, 1, ConvGeometry { stride: 1, padding: 0 }, bias, vb)
}

/// Learned 2× upsampling: transposed convolution with a 2×2 kernel and stride 2.
#[derive(Debug, Clone)]
pub struct UpConv2x2 {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv2x2 {
    pub fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((c_out * 4, c_in), "weight", KAIMING_RELU)?;
        let bound = 1.0 / (c_in as f64).sqrt();
        let bias = vb.get_with_hints(c_out, "bias", Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self { weight, bias })
    }
}

impl Module for UpConv2x2 {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let c_out = self.weight.dim(0)? / 4;
        // Each input pixel emits a 2×2 patch: (c_out·4, c) · (c, h·w) per image.
        let cols = fast_conv2d(xs, &self.weight.reshape((c_out * 4, c, 1, 1))?, ConvGeometry {
            stride: 1,
            padding: 0,
        })?;
        let ys = cols
            .reshape((b, c_out, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, c_out, 2 * h, 2 * w))?;
        ys.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Spatial batch normalization over `B×C×H×W` inputs with running estimates
/// (momentum 0.1, unbiased variance), optionally followed by ReLU.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            running_mean: Var::from_tensor(&vb.get_with_hints(channels, "running_mean", Init::Const(0.0))?)?,
            running_var: Var::from_tensor(&vb.get_with_hints(channels, "running_var", Init::Const(1.0))?)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics (and a running-estimate update) when `train`, running estimates otherwise.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.apply(xs, train, false)
    }

    /// Same as [`BatchNorm2d::forward_t`] followed by ReLU.
    pub fn forward_relu(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.apply(xs, train, true)
    }

    fn apply(&self, xs: &Tensor, train: bool, relu: bool) -> Result<Tensor> {
        if train {
            let (ys, (mean, var, n)) = fused::batch_norm_train(xs, &self.weight, &self.bias, self.eps, relu)?;
            let unbias = if n > 1 { n as f32 / (n as f32 - 1.0) } else { 1.0 };
            let m = self.momentum as f32;
            let blend = |old: &Var, new: &[f32], k: f32| -> Result<()> {
                let prev: Vec<f32> = old.as_tensor().to_vec1()?;
                let next: Vec<f32> = prev.iter().zip(new).map(|(p, v)| (1.0 - m) * p + m * k * v).collect();
                old.set(&Tensor::from_vec(next, prev.len(), old.device())?)
            };
            blend(&self.running_mean, &mean, 1.0)?;
            blend(&self.running_var, &var, unbias)?;
            return Ok(ys);
        }
        let scale = (&self.weight / (self.running_var.as_tensor() + self.eps)?.sqrt()?)?;
        let shift = (&self.bias - (self.running_mean.as_tensor() * &scale)?)?;
        let ys = xs
            .broadcast_mul(&scale.reshape((1, (), 1, 1))?)?
            .broadcast_add(&shift.reshape((1, (), 1, 1))?)?;
        if relu {
            ys.relu()
        } else {
            Ok(ys)
        }
    }
}

pub fn batch_norm(channels: usize, vb: VarBuilder) -> Result<BatchNorm2d> {
    BatchNorm2d::new(channels, vb)
}

pub fn linear(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    candle_nn::linear(c_in, c_out, vb)
}

/// Exponential linear unit with alpha = 1.
pub fn elu(xs: &Tensor) -> Result<Tensor> {
    // relu(x) + min(exp(x) - 1, 0), written with differentiable primitives.
    let neg = xs.minimum(0f32)?.exp()?.affine(1.0, -1.0)?;
    xs.relu()? + neg
}

/// Reverses the last axis of a tensor.
pub fn flip_last(xs: &Tensor) -> Result<Tensor> {
    let n = xs.dim(candle_core::D::Minus1)?;
    let idx: Vec<u32> = (0..n as u32).rev().collect();
    let idx = Tensor::from_vec(idx, n, xs.device())?;
    xs.index_select(&idx, xs.rank() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_regardless_of_order() {
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let va = a.var_builder();
        let vb = b.var_builder();
        linear(4, 3, va.pp("x")).unwrap();
        linear(5, 2, va.pp("y")).unwrap();
        linear(5, 2, vb.pp("y")).unwrap();
        linear(4, 3, vb.pp("x")).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let c = ParamStore::new(4);
        linear(4, 3, c.var_builder().pp("x")).unwrap();
        linear(5, 2, c.var_builder().pp("y")).unwrap();
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn upconv_doubles_resolution_and_places_patches() {
        let store = ParamStore::new(0);
        let up = UpConv2x2::new(1, 1, store.var_builder()).unwrap();
        // weight rows are (c_out, dy, dx) flattened; set to 1,2,3,4 with zero bias.
        let (_, w) = &store.named_vars()[1];
        w.set(&Tensor::new(&[[1f32], [2.], [3.], [4.]], &Device::Cpu).unwrap()).unwrap();
        let (_, b) = &store.named_vars()[0];
        b.set(&Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::new(&[[[[1f32, 10.]]]], &Device::Cpu).unwrap();
        let y = up.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(rows, vec![vec![1., 2., 10., 20.], vec![3., 4., 30., 40.]]);
    }

    #[test]
    fn elu_matches_definition() {
        let x = Tensor::new(&[-2f32, -0.5, 0.0, 1.5], &Device::Cpu).unwrap();
        let y = elu(&x).unwrap().to_vec1::<f32>().unwrap();
        let want = [(-2f32).exp() - 1.0, (-0.5f32).exp() - 1.0, 0.0, 1.5];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checksum_tracks_updates() {
        let store = ParamStore::new(1);
        linear(3, 3, store.var_builder()).unwrap();
        let before = store.checksum().unwrap();
        let (_, v) = &store.named_vars()[0];
        v.set(&v.as_tensor().affine(1.0, 1.0).unwrap()).unwrap();
        assert_ne!(before, store.checksum().unwrap());
    }
}
