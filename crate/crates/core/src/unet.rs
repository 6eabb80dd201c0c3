//! Encoder-decoder segmentation network with same-resolution skip concatenations.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_norm, conv1x1, conv3x3, max_pool_2x2, BatchNorm2d, Conv2d, ParamStore, UpConv2x2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 64, input_size: 224 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::InvalidArgument(format!("unet depth must lie in 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("unet base_channels must be at least 1".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "unet input_size {} is not divisible by 2^{} = {div}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channel count at encoder level `i` (level `depth` is the bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }
}

/// Two 3×3 conv + BN + ReLU layers.
#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            c1: conv3x3(c_in, c_out, false, vb.pp("conv1"))?,
            b1: batch_norm(c_out, vb.pp("bn1"))?,
            c2: conv3x3(c_out, c_out, false, vb.pp("conv2"))?,
            b2: batch_norm(c_out, vb.pp("bn2"))?,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let xs = self.b1.forward_relu(&self.c1.forward(xs)?, train)?;
        self.b2.forward_relu(&self.c2.forward(&xs)?, train)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: UpConv2x2,
    block: ConvBlock,
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Ordered from the deepest level up to full resolution.
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

pub fn build_unet(config: &UNetConfig, store: &ParamStore) -> Result<UNet> {
    config.validate()?;
    let vb = store.var_builder();
    let mut encoder = Vec::new();
    let mut c = 3;
    for i in 0..config.depth {
        encoder.push(ConvBlock::new(c, config.channels_at(i), vb.pp(format!("enc{i}")))?);
        c = config.channels_at(i);
    }
    let bottleneck = ConvBlock::new(c, config.channels_at(config.depth), vb.pp("bottleneck"))?;
    let mut decoder = Vec::new();
    for i in (0..config.depth).rev() {
        let c_up = config.channels_at(i);
        let dvb = vb.pp(format!("dec{i}"));
        let in_channels = c_up + config.channels_at(i);
        decoder.push(DecoderLevel {
            up: UpConv2x2::new(config.channels_at(i + 1), c_up, dvb.pp("up"))?,
            block: ConvBlock::new(in_channels, c_up, dvb.pp("block"))?,
            in_channels,
        });
    }
    let head = conv1x1(config.base_channels, 1, true, vb.pp("head"))?;
    Ok(UNet { config: *config, encoder, bottleneck, decoder, head })
}

impl UNet {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Input channels of each decoder conv block, from the deepest level up.
    pub fn decoder_input_channels(&self) -> Vec<usize> {
        self.decoder.iter().map(|d| d.in_channels).collect()
    }

    /// Pre-sigmoid scores, `B×1×S×S`.
    pub fn logits_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = xs.dims4()?;
        let s = self.config.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape { expected: format!("B×3×{s}×{s}"), actual: format!("B×{c}×{h}×{w}") });
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut xs = xs.clone();
        for block in &self.encoder {
            let ys = block.forward_t(&xs, train)?;
            xs = max_pool_2x2(&ys)?;
            skips.push(ys);
        }
        xs = self.bottleneck.forward_t(&xs, train)?;
        for level in &self.decoder {
            let up = level.up.forward(&xs)?;
            let skip = skips.pop().expect("one skip per level");
            xs = level.block.forward_t(&Tensor::cat(&[&up, &skip], 1)?, train)?;
        }
        Ok(self.head.forward(&xs)?)
    }

    /// Per-pixel bleeding probabilities, `B×1×S×S`.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits_t(xs, train)?)?)
    }
}

/// Inference-mode probabilities for a `B×3×S×S` batch.
pub fn unet_forward(unet: &UNet, batch: &Tensor) -> Result<Tensor> {
    unet.forward_t(batch, false)
}

/// Pixel is 1 iff probability ≥ threshold.
pub fn binarize_mask(probs: &Array2<f32>, threshold: f64) -> Array2<u8> {
    crate::metrics::binarize(probs, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use ndarray::array;

    #[test]
    fn bottleneck_and_divisibility() {
        assert_eq!(UNetConfig::default().bottleneck_size(), 14);
        assert!(UNetConfig { input_size: 100, ..UNetConfig::default() }.validate().is_err());
        assert!(UNetConfig { depth: 0, ..UNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn output_matches_input_size() {
        for depth in [1, 3, 4] {
            let cfg = UNetConfig { depth, base_channels: 4, input_size: 32 };
            let net = build_unet(&cfg, &ParamStore::new(0)).unwrap();
            let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
            let y = unet_forward(&net, &x).unwrap();
            assert_eq!(y.dims(), &[2, 1, 32, 32]);
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn skips_are_concatenated() {
        let cfg = UNetConfig { depth: 3, base_channels: 8, input_size: 32 };
        let net = build_unet(&cfg, &ParamStore::new(0)).unwrap();
        // upsampled (c_i) + encoder (c_i) at levels 2, 1, 0
        assert_eq!(net.decoder_input_channels(), vec![32 + 32, 16 + 16, 8 + 8]);
    }

    #[test]
    fn zero_input_finite_and_repeatable() {
        let cfg = UNetConfig { depth: 2, base_channels: 4, input_size: 16 };
        let net = build_unet(&cfg, &ParamStore::new(1)).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let a: Vec<f32> = unet_forward(&net, &x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = unet_forward(&net, &x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
        let bad = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(unet_forward(&net, &bad).is_err());
    }

    #[test]
    fn binarize_examples() {
        assert!(binarize_mask(&Array2::from_elem((3, 3), 0.9), 0.5).iter().all(|&v| v == 1));
        assert!(binarize_mask(&Array2::from_elem((3, 3), 0.1), 0.5).iter().all(|&v| v == 0));
        let checker = array![[0.4f32, 0.6], [0.6, 0.4]];
        assert_eq!(binarize_mask(&checker, 0.5), array![[0u8, 1], [1, 0]]);
    }
}
