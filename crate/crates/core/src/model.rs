//! The full model: backbone + heads + U-Net, each with its own parameter store,
//! plus single-file checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneSpec};
use crate::dataset::{images_to_tensor, resize_image, BoundingBox, ImageSample};
use crate::error::{Error, Result};
use crate::heads::{build_heads, decode_outputs, HeadConfig, Heads, FIRST_LAYER_WEIGHT};
use crate::nn::{flip_last, ParamStore};
use crate::unet::{build_unet, UNet, UNetConfig};

const CHECKPOINT_FORMAT: &str = "colonnet-checkpoint-v1";

/// Images per forward pass during inference.
pub const INFERENCE_BATCH: usize = 16;

/// Independently trainable / freezable parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    ClassificationHead,
    DetectionHead,
    Unet,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::Backbone, Component::ClassificationHead, Component::DetectionHead, Component::Unet];

    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::ClassificationHead => "classification_head",
            Component::DetectionHead => "detection_head",
            Component::Unet => "unet",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Component::Backbone => "backbone.",
            Component::ClassificationHead => "cls.",
            Component::DetectionHead => "det.",
            Component::Unet => "unet.",
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub heads: HeadConfig,
    pub unet: UNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneSpec::default(), heads: HeadConfig::default(), unet: UNetConfig::default() }
    }
}

impl ModelConfig {
    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        self.unet.validate()?;
        if self.backbone.input_size != self.unet.input_size {
            return Err(Error::InvalidArgument(format!(
                "backbone input_size {} differs from unet input_size {}",
                self.backbone.input_size, self.unet.input_size
            )));
        }
        Ok(())
    }
}

/// Output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bleed_prob: f64,
    pub bbox: BoundingBox,
    /// Per-pixel probabilities at the model's input resolution.
    pub mask_probs: Array2<f32>,
}

/// Anything that can score images, used by evaluation.
pub trait Predictor {
    fn input_size(&self) -> usize;

    /// `B×3×S×S` batch at [`Predictor::input_size`].
    fn predict_batch(&self, batch: &Tensor) -> Result<Vec<Prediction>>;

    /// Resizes each sample's image to the input size and predicts in batches.
    fn predict_samples(&self, samples: &[ImageSample]) -> Result<Vec<Prediction>> {
        let s = self.input_size();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_BATCH) {
            let images: Vec<_> = chunk.iter().map(|x| resize_image(&x.image, s, s)).collect();
            let refs: Vec<_> = images.iter().collect();
            out.extend(self.predict_batch(&images_to_tensor(&refs, &Device::Cpu)?)?);
        }
        Ok(out)
    }
}

/// SHA-256 of every component's parameters.
pub type Checksums = BTreeMap<Component, String>;

#[derive(Debug, Clone)]
pub struct ColonNet {
    config: ModelConfig,
    seed: u64,
    stores: BTreeMap<Component, ParamStore>,
    backbone: Backbone,
    heads: Heads,
    unet: UNet,
}

fn component_seed(seed: u64, c: Component) -> u64 {
    seed ^ c.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl ColonNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stores: BTreeMap<_, _> =
            Component::ALL.into_iter().map(|c| (c, ParamStore::new(component_seed(seed, c)))).collect();
        let backbone = build_backbone(&config.backbone, &stores[&Component::Backbone])?;
        let heads = build_heads(
            &config.heads,
            config.backbone.feature_shape(),
            &stores[&Component::ClassificationHead],
            &stores[&Component::DetectionHead],
        )?;
        let unet = build_unet(&config.unet, &stores[&Component::Unet])?;
        Ok(Self { config: config.clone(), seed, stores, backbone, heads, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn store(&self, component: Component) -> &ParamStore {
        &self.stores[&component]
    }

    pub fn checksum(&self, component: Component) -> Result<String> {
        Ok(self.store(component).checksum()?)
    }

    pub fn checksums(&self) -> Result<Checksums> {
        Component::ALL.into_iter().map(|c| Ok((c, self.checksum(c)?))).collect()
    }

    /// True if `component` still holds exactly its seeded initial values.
    pub fn is_untrained(&self, component: Component) -> Result<bool> {
        let fresh = Self::new(&self.config, self.seed)?;
        Ok(fresh.checksum(component)? == self.checksum(component)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.stores.values().map(ParamStore::num_parameters).sum()
    }

    /// Projects backbone kernels and the heads' first layers onto their
    /// left-right mirror-symmetric parts. Afterwards the tiny backbone's features
    /// flip with the input and both heads ignore a horizontal flip of the features.
    pub fn mirror_symmetrize(&self) -> Result<()> {
        let sym = |t: &Tensor| -> candle_core::Result<Tensor> { (t + flip_last(t)?)? * 0.5 };
        for (_, var) in self.store(Component::Backbone).named_vars() {
            let dims = var.dims();
            if dims.len() == 4 && dims[3] > 1 {
                var.set(&sym(var.as_tensor())?)?;
            }
        }
        let f = self.config.backbone.feature_shape();
        for c in [Component::ClassificationHead, Component::DetectionHead] {
            for (name, var) in self.store(c).named_vars() {
                if name == FIRST_LAYER_WEIGHT {
                    let out = var.dim(0)?;
                    let w = var.as_tensor().reshape((out, f.channels, f.height, f.width))?;
                    var.set(&sym(&w)?.reshape((out, f.flat_len()))?)?;
                }
            }
        }
        Ok(())
    }

    /// Writes all parameters plus the model config and seed. `extra` entries are
    /// stored verbatim in the file metadata.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for c in Component::ALL {
            for (name, t) in self.store(c).tensors(c.prefix()) {
                let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
                let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                tensors.insert(name, (t.dims().to_vec(), bytes));
            }
        }
        let views = tensors
            .iter()
            .map(|(name, (shape, bytes))| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut meta: HashMap<String, String> = extra.clone().into_iter().collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("seed".into(), self.seed.to_string());
        let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Rebuilds a model from [`ColonNet::save`] output, returning the extra metadata too.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut meta: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a model checkpoint".into()));
        }
        let config: ModelConfig =
            serde_json::from_str(meta.get("model_config").ok_or_else(|| bad("missing model_config".into()))?)?;
        let seed = meta
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing seed".into()))?;
        for k in ["format", "model_config", "seed"] {
            meta.remove(k);
        }
        let model = Self::new(&config, seed)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        for c in Component::ALL {
            model.store(c).load(&tensors, c.prefix()).map_err(|e| bad(e.to_string()))?;
        }
        Ok((model, meta))
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(&self.config, self.seed)?;
        for c in Component::ALL {
            copy.store(c).load(&self.store(c).tensors(""), "")?;
        }
        Ok(copy)
    }
}

impl Predictor for ColonNet {
    fn input_size(&self) -> usize {
        self.config.input_size()
    }

    fn predict_batch(&self, batch: &Tensor) -> Result<Vec<Prediction>> {
        let features = self.backbone.forward_t(batch, false)?;
        let outs = decode_outputs(&self.heads.cls_prob(&features)?, &self.heads.det_raw(&features)?)?;
        let probs = self.unet.forward_t(batch, false)?.squeeze(1)?.to_dtype(DType::F32)?;
        let s = self.input_size();
        let mut preds = Vec::with_capacity(outs.len());
        for (i, o) in outs.into_iter().enumerate() {
            let values: Vec<f32> = probs.get(i)?.flatten_all()?.to_vec1()?;
            let mask_probs = Array2::from_shape_vec((s, s), values).expect("mask size matches input");
            preds.push(Prediction { bleed_prob: o.bleed_prob, bbox: o.bbox, mask_probs });
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec::new(BackboneKind::Tiny, 32),
            heads: HeadConfig { cls_hidden_widths: vec![8], det_hidden_widths: vec![8, 8] },
            unet: UNetConfig { depth: 2, base_channels: 4, input_size: 32 },
        }
    }

    #[test]
    fn components_are_seeded_independently() {
        let a = ColonNet::new(&tiny_config(), 0).unwrap();
        let b = ColonNet::new(&tiny_config(), 0).unwrap();
        let c = ColonNet::new(&tiny_config(), 1).unwrap();
        assert_eq!(a.checksums().unwrap(), b.checksums().unwrap());
        assert_ne!(a.checksum(Component::Backbone).unwrap(), c.checksum(Component::Backbone).unwrap());
        let fa = a.store(Component::ClassificationHead).tensors("")["fc0.weight"].to_vec2::<f32>().unwrap();
        let fd = a.store(Component::DetectionHead).tensors("")["fc0.weight"].to_vec2::<f32>().unwrap();
        assert_ne!(fa, fd);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let m = ColonNet::new(&tiny_config(), 5).unwrap();
        m.mirror_symmetrize().unwrap();
        let extra = BTreeMap::from([("note".to_string(), "x".to_string())]);
        m.save(&path, &extra).unwrap();
        let (back, meta) = ColonNet::load(&path).unwrap();
        assert_eq!(meta, extra);
        assert_eq!(back.seed(), 5);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.checksums().unwrap(), m.checksums().unwrap());
    }

    #[test]
    fn garbage_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(ColonNet::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn predictions_have_input_resolution() {
        let m = ColonNet::new(&tiny_config(), 0).unwrap();
        let samples = crate::synthgen::generate(&crate::synthgen::SynthConfig {
            image_size: 48,
            ..crate::synthgen::SynthConfig::new(3, 0)
        })
        .unwrap();
        let p = m.predict_samples(&samples).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].mask_probs.dim(), (32, 32));
    }
}
