//! Classification and box-regression heads on top of the backbone feature map.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureShape};
use crate::dataset::{BoundingBox, Label};
use crate::error::{Error, Result};
use crate::nn::{elu, linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub cls_hidden_widths: Vec<usize>,
    /// Activations alternate ReLU, ELU, ReLU, ... starting from the first hidden layer.
    pub det_hidden_widths: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { cls_hidden_widths: vec![512, 128], det_hidden_widths: vec![512, 256, 64] }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [("cls_hidden_widths", &self.cls_hidden_widths), ("det_hidden_widths", &self.det_hidden_widths)] {
            if widths.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} must not be empty")));
            }
            if widths.contains(&0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {widths:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Elu,
}

/// Flatten followed by a stack of fully connected layers.
#[derive(Debug, Clone)]
struct Mlp {
    hidden: Vec<(Linear, Act)>,
    out: Linear,
}

impl Mlp {
    fn new(c_in: usize, widths: &[usize], acts: impl Fn(usize) -> Act, c_out: usize, store: &ParamStore) -> Result<Self> {
        let vb = store.var_builder();
        let mut hidden = Vec::new();
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push((linear(c, w, vb.pp(format!("fc{i}")))?, acts(i)));
            c = w;
        }
        let out = linear(c, c_out, vb.pp("out"))?;
        Ok(Self { hidden, out })
    }

    fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut xs = features.flatten_from(1)?;
        for (layer, act) in &self.hidden {
            let ys = layer.forward(&xs)?;
            xs = match act {
                Act::Relu => ys.relu()?,
                Act::Elu => elu(&ys)?,
            };
        }
        Ok(self.out.forward(&xs)?)
    }
}

/// Name of the first fully connected weight inside a head's store.
pub const FIRST_LAYER_WEIGHT: &str = "fc0.weight";

/// Both heads. Each owns its own parameter store so it can be frozen independently.
#[derive(Debug, Clone)]
pub struct Heads {
    feature_shape: FeatureShape,
    cls: Mlp,
    det: Mlp,
}

pub fn build_heads(
    config: &HeadConfig,
    feature_shape: FeatureShape,
    cls_store: &ParamStore,
    det_store: &ParamStore,
) -> Result<Heads> {
    config.validate()?;
    let flat = feature_shape.flat_len();
    let cls = Mlp::new(flat, &config.cls_hidden_widths, |_| Act::Relu, 1, cls_store)?;
    let det_act = |i: usize| if i % 2 == 0 { Act::Relu } else { Act::Elu };
    let det = Mlp::new(flat, &config.det_hidden_widths, det_act, 4, det_store)?;
    Ok(Heads { feature_shape, cls, det })
}

impl Heads {
    pub fn feature_shape(&self) -> FeatureShape {
        self.feature_shape
    }

    /// Input width of both heads' first layer.
    pub fn input_width(&self) -> usize {
        self.feature_shape.flat_len()
    }

    fn check(&self, features: &Tensor) -> Result<()> {
        let (_, c, h, w) = features.dims4()?;
        let f = self.feature_shape;
        if (h, w, c) != f.as_tuple() {
            return Err(Error::Shape {
                expected: format!("B×{}×{}×{}", f.height, f.width, f.channels),
                actual: format!("B×{h}×{w}×{c}"),
            });
        }
        Ok(())
    }

    /// Pre-sigmoid classification score, shape `B`.
    pub fn cls_logit(&self, features: &Tensor) -> Result<Tensor> {
        self.check(features)?;
        Ok(self.cls.forward(features)?.squeeze(D::Minus1)?)
    }

    pub fn cls_prob(&self, features: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.cls_logit(features)?)?)
    }

    /// Raw sigmoid corner outputs `(a, b, c, d)`, shape `B×4`.
    pub fn det_raw(&self, features: &Tensor) -> Result<Tensor> {
        self.check(features)?;
        Ok(candle_nn::ops::sigmoid(&self.det.forward(features)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColonSegOutput {
    pub bleed_prob: f64,
    pub bbox: BoundingBox,
}

/// Converts head outputs to per-image results, corner-sorting each box.
pub fn decode_outputs(probs: &Tensor, raw_boxes: &Tensor) -> Result<Vec<ColonSegOutput>> {
    let probs: Vec<f32> = probs.to_vec1()?;
    let boxes: Vec<Vec<f32>> = raw_boxes.to_vec2()?;
    Ok(probs
        .into_iter()
        .zip(boxes)
        .map(|(p, b)| ColonSegOutput {
            bleed_prob: p as f64,
            bbox: BoundingBox::from_unordered(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64),
        })
        .collect())
}

/// Inference-mode classification and detection for a `B×3×S×S` batch.
pub fn colonseg_forward(backbone: &Backbone, heads: &Heads, batch: &Tensor) -> Result<Vec<ColonSegOutput>> {
    let features = backbone.forward_t(batch, false)?;
    decode_outputs(&heads.cls_prob(&features)?, &heads.det_raw(&features)?)
}

/// Bleeding iff `bleed_prob ≥ threshold`.
pub fn classify(output: &ColonSegOutput, threshold: f64) -> Label {
    Label::from(output.bleed_prob >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneKind, BackboneSpec};
    use candle_core::{DType, Device};

    fn tiny_heads() -> (Backbone, Heads) {
        let spec = BackboneSpec::new(BackboneKind::Tiny, 64);
        let bb = build_backbone(&spec, &ParamStore::new(0)).unwrap();
        let cfg = HeadConfig { cls_hidden_widths: vec![32], det_hidden_widths: vec![32, 16, 8] };
        let heads = build_heads(&cfg, spec.feature_shape(), &ParamStore::new(1), &ParamStore::new(2)).unwrap();
        (bb, heads)
    }

    #[test]
    fn default_input_width() {
        let f = FeatureShape { height: 7, width: 7, channels: 1024 };
        assert_eq!(f.flat_len(), 50176);
        let cfg = HeadConfig { cls_hidden_widths: vec![4], det_hidden_widths: vec![4] };
        let heads = build_heads(&cfg, f, &ParamStore::new(0), &ParamStore::new(0)).unwrap();
        assert_eq!(heads.input_width(), 50176);
    }

    #[test]
    fn empty_widths_rejected() {
        let f = FeatureShape { height: 2, width: 2, channels: 64 };
        let cfg = HeadConfig { cls_hidden_widths: vec![], ..HeadConfig::default() };
        assert!(build_heads(&cfg, f, &ParamStore::new(0), &ParamStore::new(0)).is_err());
        let cfg = HeadConfig { det_hidden_widths: vec![], ..HeadConfig::default() };
        assert!(build_heads(&cfg, f, &ParamStore::new(0), &ParamStore::new(0)).is_err());
    }

    #[test]
    fn outputs_bounded_and_sorted() {
        let (bb, heads) = tiny_heads();
        let x = Tensor::zeros((3, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let out = colonseg_forward(&bb, &heads, &x).unwrap();
        assert_eq!(out.len(), 3);
        for o in out {
            assert!(o.bleed_prob > 0.0 && o.bleed_prob < 1.0);
            o.bbox.validate().unwrap();
        }
        let raw = heads.det_raw(&bb.forward_t(&x, false).unwrap()).unwrap();
        assert_eq!(raw.dims(), &[3, 4]);
    }

    #[test]
    fn corner_sort() {
        let probs = Tensor::new(&[0.7f32], &Device::Cpu).unwrap();
        let raw = Tensor::new(&[[0.4f32, 0.2, 0.1, 0.6]], &Device::Cpu).unwrap();
        let b = decode_outputs(&probs, &raw).unwrap()[0].bbox;
        let expect = [0.1, 0.2, 0.4, 0.6];
        for (g, e) in b.to_array().iter().zip(expect) {
            assert!((g - e).abs() < 1e-6);
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        let o = |p| ColonSegOutput { bleed_prob: p, bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap() };
        assert_eq!(classify(&o(0.9), 0.5), Label::Bleeding);
        assert_eq!(classify(&o(0.5), 0.5), Label::Bleeding);
        assert_eq!(classify(&o(0.49), 0.5), Label::NonBleeding);
    }

    #[test]
    fn wrong_feature_shape() {
        let (_, heads) = tiny_heads();
        let f = Tensor::zeros((1, 32, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(heads.cls_logit(&f).is_err());
    }
}
