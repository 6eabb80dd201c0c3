//! Shared convolutional feature extractors, all mapping `S×S` inputs to an
//! `S/32 × S/32` feature map.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_norm, conv1x1, conv3x3, max_pool_2x2, max_pool_3x3_s2, BatchNorm2d as BatchNorm, Conv2d, ConvGeometry, ParamStore};

/// Total spatial reduction of every registered backbone.
pub const REDUCTION: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DenseNet121,
    Vgg19,
    ResNet50,
    Tiny,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] =
        [BackboneKind::DenseNet121, BackboneKind::Vgg19, BackboneKind::ResNet50, BackboneKind::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::DenseNet121 => "densenet121",
            BackboneKind::Vgg19 => "vgg19",
            BackboneKind::ResNet50 => "resnet50",
            BackboneKind::Tiny => "tiny",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            BackboneKind::DenseNet121 => 1024,
            BackboneKind::Vgg19 => 512,
            BackboneKind::ResNet50 => 2048,
            BackboneKind::Tiny => 64,
        }
    }

    pub fn registry() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownBackbone { name: s.to_string(), registry: Self::registry() })
    }
}

/// Spatial size and depth of a backbone's output, reported as `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn flat_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_size: usize,
    pub pretrained: bool,
    pub weights_path: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { kind: BackboneKind::DenseNet121, input_size: 224, pretrained: false, weights_path: None }
    }
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, input_size: usize) -> Self {
        Self { kind, input_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % REDUCTION != 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone input_size must be a positive multiple of {REDUCTION}, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> FeatureShape {
        let side = self.input_size / REDUCTION;
        FeatureShape { height: side, width: side, channels: self.kind.channels() }
    }
}

fn bn_relu(bn: &BatchNorm, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
    bn.forward_relu(xs, train)
}

fn max_pool_3s2(xs: &Tensor) -> candle_core::Result<Tensor> {
    max_pool_3x3_s2(xs)
}

fn stem_conv7(c_out: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    Conv2d::new(3, c_out, 7, ConvGeometry { stride: 2, padding: 3 }, false, vb)
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(c_in: usize, growth: usize, bn_size: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            bn1: batch_norm(c_in, vb.pp("norm1"))?,
            conv1: conv1x1(c_in, bn_size * growth, false, vb.pp("conv1"))?,
            bn2: batch_norm(bn_size * growth, vb.pp("norm2"))?,
            conv2: conv3x3(bn_size * growth, growth, false, vb.pp("conv2"))?,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = self.conv1.forward(&bn_relu(&self.bn1, xs, train)?)?;
        let ys = self.conv2.forward(&bn_relu(&self.bn2, &ys, train)?)?;
        Tensor::cat(&[xs, &ys], 1)
    }
}

#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DenseNet121 {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm,
}

impl DenseNet121 {
    const BLOCKS: [usize; 4] = [6, 12, 24, 16];
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;

    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let mut c = 64;
        let stem = stem_conv7(c, vb.pp("conv0"))?;
        let stem_bn = batch_norm(c, vb.pp("norm0"))?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in Self::BLOCKS.iter().enumerate() {
            let bvb = vb.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::new();
            for l in 0..n {
                layers.push(DenseLayer::new(c, Self::GROWTH, Self::BN_SIZE, bvb.pp(format!("denselayer{}", l + 1)))?);
                c += Self::GROWTH;
            }
            blocks.push(layers);
            if i + 1 < Self::BLOCKS.len() {
                let tvb = vb.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    bn: batch_norm(c, tvb.pp("norm"))?,
                    conv: conv1x1(c, c / 2, false, tvb.pp("conv"))?,
                });
                c /= 2;
            }
        }
        let final_bn = batch_norm(c, vb.pp("norm5"))?;
        Ok(Self { stem, stem_bn, blocks, transitions, final_bn })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut xs = max_pool_3s2(&bn_relu(&self.stem_bn, &self.stem.forward(xs)?, train)?)?;
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                xs = layer.forward_t(&xs, train)?;
            }
            if let Some(t) = self.transitions.get(i) {
                xs = t.conv.forward(&bn_relu(&t.bn, &xs, train)?)?.avg_pool2d(2)?;
            }
        }
        bn_relu(&self.final_bn, &xs, train)
    }
}

#[derive(Debug, Clone)]
pub struct Vgg19 {
    stages: Vec<Vec<Conv2d>>,
}

impl Vgg19 {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let mut c = 3;
        let mut idx = 0;
        let mut stages = Vec::new();
        for (width, n) in Self::STAGES {
            let mut convs = Vec::new();
            for _ in 0..n {
                convs.push(conv3x3(c, width, true, vb.pp(format!("features.{idx}")))?);
                c = width;
                idx += 1;
            }
            stages.push(convs);
        }
        Ok(Self { stages })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut xs = xs.clone();
        for stage in &self.stages {
            for conv in stage {
                xs = conv.forward(&xs)?.relu()?;
            }
            xs = max_pool_2x2(&xs)?;
        }
        Ok(xs)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(c_in: usize, width: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let c_out = width * 4;
        let downsample = if stride != 1 || c_in != c_out {
            let geo = ConvGeometry { stride, padding: 0 };
            Some((Conv2d::new(c_in, c_out, 1, geo, false, vb.pp("downsample.0"))?, batch_norm(c_out, vb.pp("downsample.1"))?))
        } else {
            None
        };
        Ok(Self {
            conv1: conv1x1(c_in, width, false, vb.pp("conv1"))?,
            bn1: batch_norm(width, vb.pp("bn1"))?,
            conv2: Conv2d::new(width, width, 3, ConvGeometry { stride, padding: 1 }, false, vb.pp("conv2"))?,
            bn2: batch_norm(width, vb.pp("bn2"))?,
            conv3: conv1x1(width, c_out, false, vb.pp("conv3"))?,
            bn3: batch_norm(c_out, vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = bn_relu(&self.bn1, &self.conv1.forward(xs)?, train)?;
        let ys = bn_relu(&self.bn2, &self.conv2.forward(&ys)?, train)?;
        let ys = self.bn3.forward_t(&self.conv3.forward(&ys)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(xs)?, train)?,
            None => xs.clone(),
        };
        (ys + skip)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct ResNet50 {
    stem: Conv2d,
    stem_bn: BatchNorm,
    layers: Vec<Bottleneck>,
}

impl ResNet50 {
    const LAYERS: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];

    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let stem = stem_conv7(64, vb.pp("conv1"))?;
        let stem_bn = batch_norm(64, vb.pp("bn1"))?;
        let mut c = 64;
        let mut layers = Vec::new();
        for (i, (width, n)) in Self::LAYERS.into_iter().enumerate() {
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                layers.push(Bottleneck::new(c, width, stride, vb.pp(format!("layer{}.{j}", i + 1)))?);
                c = width * 4;
            }
        }
        Ok(Self { stem, stem_bn, layers })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut xs = max_pool_3s2(&bn_relu(&self.stem_bn, &self.stem.forward(xs)?, train)?)?;
        for layer in &self.layers {
            xs = layer.forward_t(&xs, train)?;
        }
        Ok(xs)
    }
}

#[derive(Debug, Clone)]
struct TinyBlock {
    grow: Conv2d,
    grow_bn: BatchNorm,
    fuse: Conv2d,
    fuse_bn: BatchNorm,
}

/// Desk-scale extractor: a stem and four dense-style blocks, each followed by
/// 2×2 average pooling. Uses only 3×3/1×1 stride-1 convolutions so that
/// mirror-symmetric kernels give an exactly flip-equivariant network.
#[derive(Debug, Clone)]
pub struct Tiny {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<TinyBlock>,
}

impl Tiny {
    pub const STEM: usize = 16;
    pub const GROWTH: usize = 16;
    pub const WIDTHS: [usize; 4] = [24, 32, 48, 64];

    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let stem = conv3x3(3, Self::STEM, false, vb.pp("stem.conv"))?;
        let stem_bn = batch_norm(Self::STEM, vb.pp("stem.bn"))?;
        let mut c = Self::STEM;
        let mut blocks = Vec::new();
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            let bvb = vb.pp(format!("block{i}"));
            blocks.push(TinyBlock {
                grow: conv3x3(c, Self::GROWTH, false, bvb.pp("grow"))?,
                grow_bn: batch_norm(Self::GROWTH, bvb.pp("grow_bn"))?,
                fuse: conv1x1(c + Self::GROWTH, w, false, bvb.pp("fuse"))?,
                fuse_bn: batch_norm(w, bvb.pp("fuse_bn"))?,
            });
            c = w;
        }
        Ok(Self { stem, stem_bn, blocks })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut xs = bn_relu(&self.stem_bn, &self.stem.forward(xs)?, train)?.avg_pool2d(2)?;
        for b in &self.blocks {
            let grown = bn_relu(&b.grow_bn, &b.grow.forward(&xs)?, train)?;
            let cat = Tensor::cat(&[&xs, &grown], 1)?;
            xs = bn_relu(&b.fuse_bn, &b.fuse.forward(&cat)?, train)?.avg_pool2d(2)?;
        }
        Ok(xs)
    }
}

#[derive(Debug, Clone)]
enum Net {
    DenseNet121(DenseNet121),
    Vgg19(Vgg19),
    ResNet50(ResNet50),
    Tiny(Tiny),
}

/// A constructed feature extractor. Inputs and outputs are channel-first (`B×C×H×W`).
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    net: Net,
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.spec.feature_shape()
    }

    /// Runs the network. `train` selects batch statistics and updates running estimates.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = xs.dims4()?;
        let s = self.spec.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape { expected: format!("B×3×{s}×{s}"), actual: format!("B×{c}×{h}×{w}") });
        }
        Ok(match &self.net {
            Net::DenseNet121(n) => n.forward_t(xs, train)?,
            Net::Vgg19(n) => n.forward(xs)?,
            Net::ResNet50(n) => n.forward_t(xs, train)?,
            Net::Tiny(n) => n.forward_t(xs, train)?,
        })
    }
}

/// Builds a backbone whose parameters live in `store`.
///
/// With `pretrained` set and a readable `weights_path` (safetensors, names as
/// created here), the stored values are replaced; otherwise the random
/// initialization stays and a warning is logged.
pub fn build_backbone(spec: &BackboneSpec, store: &ParamStore) -> Result<Backbone> {
    spec.validate()?;
    let vb = store.var_builder();
    let net = match spec.kind {
        BackboneKind::DenseNet121 => Net::DenseNet121(DenseNet121::new(vb)?),
        BackboneKind::Vgg19 => Net::Vgg19(Vgg19::new(vb)?),
        BackboneKind::ResNet50 => Net::ResNet50(ResNet50::new(vb)?),
        BackboneKind::Tiny => Net::Tiny(Tiny::new(vb)?),
    };
    if spec.pretrained {
        match &spec.weights_path {
            Some(path) if path.is_file() => {
                let tensors = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
                store.load(&tensors, "")?;
                info!("loaded {} backbone weights from {}", spec.kind, path.display());
            }
            Some(path) => warn!("weights file {} not found; {} starts from random initialization", path.display(), spec.kind),
            None => warn!("no weights path configured; {} starts from random initialization", spec.kind),
        }
    }
    Ok(Backbone { spec: spec.clone(), net })
}

/// Inference-mode features for a `B×3×S×S` batch.
pub fn extract_features(backbone: &Backbone, batch: &Tensor) -> Result<Tensor> {
    backbone.forward_t(batch, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn features(kind: BackboneKind, size: usize, batch: usize) -> Vec<usize> {
        let store = ParamStore::new(0);
        let bb = build_backbone(&BackboneSpec::new(kind, size), &store).unwrap();
        let x = Tensor::rand(0f32, 1f32, (batch, 3, size, size), &Device::Cpu).unwrap();
        extract_features(&bb, &x).unwrap().dims().to_vec()
    }

    #[test]
    fn tiny_shape_contract() {
        for b in [1, 2, 5] {
            assert_eq!(features(BackboneKind::Tiny, 64, b), vec![b, 64, 2, 2]);
        }
        assert_eq!(BackboneSpec::new(BackboneKind::Tiny, 64).feature_shape().as_tuple(), (2, 2, 64));
    }

    #[test]
    fn large_backbones_reduce_by_32() {
        assert_eq!(features(BackboneKind::Vgg19, 64, 1), vec![1, 512, 2, 2]);
        assert_eq!(features(BackboneKind::ResNet50, 64, 2), vec![2, 2048, 2, 2]);
        assert_eq!(features(BackboneKind::DenseNet121, 64, 1), vec![1, 1024, 2, 2]);
    }

    #[test]
    fn registry_errors_list_names() {
        let err = "alexnet".parse::<BackboneKind>().unwrap_err().to_string();
        for k in BackboneKind::ALL {
            assert!(err.contains(k.name()), "{err}");
        }
        assert_eq!("DenseNet121".parse::<BackboneKind>().unwrap(), BackboneKind::DenseNet121);
    }

    #[test]
    fn wrong_size_names_both_shapes() {
        let store = ParamStore::new(0);
        let bb = build_backbone(&BackboneSpec::new(BackboneKind::Tiny, 64), &store).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let err = extract_features(&bb, &x).unwrap_err().to_string();
        assert!(err.contains("64") && err.contains("32"), "{err}");
        assert!(BackboneSpec::new(BackboneKind::Tiny, 100).validate().is_err());
    }

    #[test]
    fn zero_input_is_finite_and_deterministic() {
        let store = ParamStore::new(4);
        let bb = build_backbone(&BackboneSpec::new(BackboneKind::Tiny, 64), &store).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let a: Vec<f32> = extract_features(&bb, &x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = extract_features(&bb, &x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn missing_weights_fall_back_to_random() {
        let store = ParamStore::new(0);
        let spec = BackboneSpec {
            pretrained: true,
            weights_path: Some("/nonexistent/w.safetensors".into()),
            ..BackboneSpec::new(BackboneKind::Tiny, 64)
        };
        assert!(build_backbone(&spec, &store).is_ok());
    }
}
