//! Flat `key = value` run configuration shared by the command-line tools.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneKind, BackboneSpec};
use crate::dataset::AugmentationConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::losses::FocalTverskyConfig;
use crate::metrics::EvalThresholds;
use crate::model::ModelConfig;
use crate::trainer::{OptimizerConfig, OptimizerKind, StageSpec, TrainingSchedule};
use crate::unet::UNetConfig;

/// Environment variable that overrides the `seed` key.
pub const SEED_ENV: &str = "COLONNET_SEED";

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialization, splitting, shuffling and augmentation"),
    ("input_size", "224", "square model input side; multiple of 32 and of 2^unet.depth"),
    ("dataset.root", "data", "dataset directory (images/, masks/, annotations.csv)"),
    ("dataset.train_fraction", "0.8", "fraction of samples used for training"),
    ("output.dir", "runs/default", "directory for checkpoint.bin and report.json"),
    ("backbone.name", "densenet121", "densenet121, vgg19, resnet50 or tiny"),
    ("backbone.pretrained", "false", "load backbone weights from backbone.weights_path"),
    ("backbone.weights_path", "", "safetensors file with backbone weights"),
    ("heads.cls_widths", "512,128", "hidden widths of the classification head"),
    ("heads.det_widths", "512,256,64", "hidden widths of the detection head (ReLU/ELU alternating)"),
    ("unet.depth", "4", "number of U-Net down-sampling levels"),
    ("unet.base_channels", "64", "U-Net channels at full resolution"),
    ("loss.ft_alpha", "0.7", "Focal Tversky false-negative weight"),
    ("loss.ft_beta", "0.3", "Focal Tversky false-positive weight"),
    ("loss.ft_gamma", "1.3333333333333333", "Focal Tversky exponent"),
    ("loss.ft_epsilon", "0.000001", "Focal Tversky smoothing"),
    ("train.optimizer", "adam", "optimizer (adam)"),
    ("train.lr", "0.0001", "learning rate"),
    ("train.batch_size", "16", "mini-batch size"),
    ("train.det_epochs", "10", "detection stage epochs"),
    ("train.cls_epochs", "20", "classification stage epochs"),
    ("train.seg_epochs", "40", "segmentation stage epochs"),
    ("train.det_lr", "", "detection stage learning rate (empty: train.lr)"),
    ("train.cls_lr", "", "classification stage learning rate (empty: train.lr)"),
    ("train.seg_lr", "", "segmentation stage learning rate (empty: train.lr)"),
    ("train.det_train_backbone", "true", "update the backbone during the detection stage"),
    ("train.validate_each_epoch", "false", "score the validation split after every epoch"),
    ("augment.flip_h_prob", "0.5", "horizontal flip probability"),
    ("augment.flip_v_prob", "0.5", "vertical flip probability"),
    ("augment.rotations", "0,90,180,270", "rotation choices in degrees (multiples of 90)"),
    ("augment.contrast_ablation", "false", "apply CLAHE + erosion + dilation to training images"),
    ("eval.cls_threshold", "0.5", "bleeding decision threshold"),
    ("eval.mask_threshold", "0.5", "mask binarization threshold"),
    ("eval.iou_threshold", "0.5", "box IoU needed for a detection hit"),
    ("cam.alpha", "0.4", "heatmap opacity in CAM overlays"),
];

/// Key/default listing for `--help` output.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (key = default):\n");
    for (k, d, desc) in KEYS {
        let shown = if d.is_empty() { "(unset)" } else { d };
        let _ = writeln!(out, "  {k:<28} {shown:<18} {desc}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub input_size: usize,
    pub dataset_root: PathBuf,
    pub train_fraction: f64,
    pub output_dir: PathBuf,
    pub backbone: BackboneKind,
    pub pretrained: bool,
    pub weights_path: Option<PathBuf>,
    pub cls_widths: Vec<usize>,
    pub det_widths: Vec<usize>,
    pub unet_depth: usize,
    pub unet_base_channels: usize,
    pub focal_tversky: FocalTverskyConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub det_epochs: usize,
    pub cls_epochs: usize,
    pub seg_epochs: usize,
    pub det_lr: Option<f64>,
    pub cls_lr: Option<f64>,
    pub seg_lr: Option<f64>,
    pub det_train_backbone: bool,
    pub validate_each_epoch: bool,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rotations: Vec<u32>,
    pub contrast_ablation: bool,
    pub thresholds: EvalThresholds,
    pub cam_alpha: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self::blank();
        for (k, d, _) in KEYS {
            cfg.set(k, d).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigValue { key: key.into(), message: format!("cannot parse {value:?}") })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunConfig {
    fn blank() -> Self {
        Self {
            seed: 0,
            input_size: 0,
            dataset_root: PathBuf::new(),
            train_fraction: 0.0,
            output_dir: PathBuf::new(),
            backbone: BackboneKind::DenseNet121,
            pretrained: false,
            weights_path: None,
            cls_widths: Vec::new(),
            det_widths: Vec::new(),
            unet_depth: 0,
            unet_base_channels: 0,
            focal_tversky: FocalTverskyConfig::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.0,
            batch_size: 0,
            det_epochs: 0,
            cls_epochs: 0,
            seg_epochs: 0,
            det_lr: None,
            cls_lr: None,
            seg_lr: None,
            det_train_backbone: true,
            validate_each_epoch: false,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotations: Vec::new(),
            contrast_ablation: false,
            thresholds: EvalThresholds::default(),
            cam_alpha: 0.0,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "input_size" => self.input_size = parse(key, v)?,
            "dataset.root" => self.dataset_root = PathBuf::from(v),
            "dataset.train_fraction" => self.train_fraction = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "backbone.name" => {
                self.backbone = v
                    .parse()
                    .map_err(|e: Error| Error::ConfigValue { key: key.into(), message: e.to_string() })?
            }
            "backbone.pretrained" => self.pretrained = parse(key, v)?,
            "backbone.weights_path" => self.weights_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "heads.cls_widths" => self.cls_widths = parse_list(key, v)?,
            "heads.det_widths" => self.det_widths = parse_list(key, v)?,
            "unet.depth" => self.unet_depth = parse(key, v)?,
            "unet.base_channels" => self.unet_base_channels = parse(key, v)?,
            "loss.ft_alpha" => self.focal_tversky.alpha = parse(key, v)?,
            "loss.ft_beta" => self.focal_tversky.beta = parse(key, v)?,
            "loss.ft_gamma" => self.focal_tversky.gamma = parse(key, v)?,
            "loss.ft_epsilon" => self.focal_tversky.epsilon = parse(key, v)?,
            "train.optimizer" => {
                self.optimizer = match v.to_ascii_lowercase().as_str() {
                    "adam" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::ConfigValue { key: key.into(), message: format!("unknown optimizer {other:?}; available: adam") })
                    }
                }
            }
            "train.lr" => self.learning_rate = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.det_epochs" => self.det_epochs = parse(key, v)?,
            "train.cls_epochs" => self.cls_epochs = parse(key, v)?,
            "train.seg_epochs" => self.seg_epochs = parse(key, v)?,
            "train.det_lr" => self.det_lr = parse_opt(key, v)?,
            "train.cls_lr" => self.cls_lr = parse_opt(key, v)?,
            "train.seg_lr" => self.seg_lr = parse_opt(key, v)?,
            "train.det_train_backbone" => self.det_train_backbone = parse(key, v)?,
            "train.validate_each_epoch" => self.validate_each_epoch = parse(key, v)?,
            "augment.flip_h_prob" => self.flip_h_prob = parse(key, v)?,
            "augment.flip_v_prob" => self.flip_v_prob = parse(key, v)?,
            "augment.rotations" => self.rotations = parse_list(key, v)?,
            "augment.contrast_ablation" => self.contrast_ablation = parse(key, v)?,
            "eval.cls_threshold" => self.thresholds.classification = parse(key, v)?,
            "eval.mask_threshold" => self.thresholds.mask = parse(key, v)?,
            "eval.iou_threshold" => self.thresholds.iou = parse(key, v)?,
            "cam.alpha" => self.cam_alpha = parse(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.into())),
        }
        Ok(())
    }

    /// Current value of a key in the same textual form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "input_size" => self.input_size.to_string(),
            "dataset.root" => self.dataset_root.display().to_string(),
            "dataset.train_fraction" => self.train_fraction.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            "backbone.name" => self.backbone.to_string(),
            "backbone.pretrained" => self.pretrained.to_string(),
            "backbone.weights_path" => self.weights_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "heads.cls_widths" => join(&self.cls_widths),
            "heads.det_widths" => join(&self.det_widths),
            "unet.depth" => self.unet_depth.to_string(),
            "unet.base_channels" => self.unet_base_channels.to_string(),
            "loss.ft_alpha" => self.focal_tversky.alpha.to_string(),
            "loss.ft_beta" => self.focal_tversky.beta.to_string(),
            "loss.ft_gamma" => self.focal_tversky.gamma.to_string(),
            "loss.ft_epsilon" => self.focal_tversky.epsilon.to_string(),
            "train.optimizer" => "adam".to_string(),
            "train.lr" => self.learning_rate.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.det_epochs" => self.det_epochs.to_string(),
            "train.cls_epochs" => self.cls_epochs.to_string(),
            "train.seg_epochs" => self.seg_epochs.to_string(),
            "train.det_lr" => opt(&self.det_lr),
            "train.cls_lr" => opt(&self.cls_lr),
            "train.seg_lr" => opt(&self.seg_lr),
            "train.det_train_backbone" => self.det_train_backbone.to_string(),
            "train.validate_each_epoch" => self.validate_each_epoch.to_string(),
            "augment.flip_h_prob" => self.flip_h_prob.to_string(),
            "augment.flip_v_prob" => self.flip_v_prob.to_string(),
            "augment.rotations" => join(&self.rotations),
            "augment.contrast_ablation" => self.contrast_ablation.to_string(),
            "eval.cls_threshold" => self.thresholds.classification.to_string(),
            "eval.mask_threshold" => self.thresholds.mask.to_string(),
            "eval.iou_threshold" => self.thresholds.iou.to_string(),
            "cam.alpha" => self.cam_alpha.to_string(),
            _ => return Err(Error::UnknownConfigKey(key.into())),
        })
    }

    /// Parses config text on top of the defaults. Unknown and repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigSyntax { line: i + 1, message: format!("expected `key = value`, got {line:?}") })?;
            let key = key.trim();
            cfg.set(key, value)?;
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigSyntax { line: i + 1, message: format!("key {key:?} given twice") });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Every key in table order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Cross-key checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, e: Error| Error::ConfigValue { key: key.into(), message: e.to_string() };
        self.model_config().validate().map_err(|e| {
            let key = match &e {
                Error::InvalidArgument(m) if m.contains("unet") => "unet.depth",
                Error::InvalidArgument(m) if m.contains("cls_hidden") => "heads.cls_widths",
                Error::InvalidArgument(m) if m.contains("det_hidden") => "heads.det_widths",
                _ => "input_size",
            };
            err(key, e)
        })?;
        self.focal_tversky.validate().map_err(|e| err("loss.ft_alpha", e))?;
        let sched = self.schedule();
        sched.optimizer.validate().map_err(|e| err("train.lr", e))?;
        for s in &sched.stages {
            s.validate().map_err(|e| err("train.det_lr", e))?;
        }
        sched.augmentation.validate().map_err(|e| err("augment.rotations", e))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::ConfigValue { key: "dataset.train_fraction".into(), message: "must lie in (0,1)".into() });
        }
        for (k, v) in [
            ("eval.cls_threshold", self.thresholds.classification),
            ("eval.mask_threshold", self.thresholds.mask),
            ("eval.iou_threshold", self.thresholds.iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::ConfigValue { key: k.into(), message: "must lie in (0,1)".into() });
            }
        }
        if !(0.0..=1.0).contains(&self.cam_alpha) {
            return Err(Error::ConfigValue { key: "cam.alpha".into(), message: "must lie in [0,1]".into() });
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec {
                kind: self.backbone,
                input_size: self.input_size,
                pretrained: self.pretrained,
                weights_path: self.weights_path.clone(),
            },
            heads: HeadConfig { cls_hidden_widths: self.cls_widths.clone(), det_hidden_widths: self.det_widths.clone() },
            unet: UNetConfig { depth: self.unet_depth, base_channels: self.unet_base_channels, input_size: self.input_size },
        }
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            stages: vec![
                StageSpec::detection(self.det_epochs, self.det_train_backbone).with_learning_rate(self.det_lr),
                StageSpec::classification(self.cls_epochs).with_learning_rate(self.cls_lr),
                StageSpec::segmentation(self.seg_epochs).with_learning_rate(self.seg_lr),
            ],
            optimizer: OptimizerConfig {
                method: self.optimizer,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                seed: self.seed,
            },
            augmentation: AugmentationConfig {
                flip_h_prob: self.flip_h_prob,
                flip_v_prob: self.flip_v_prob,
                rotation_choices: self.rotations.clone(),
                target_size: self.input_size,
                ablation_contrast: self.contrast_ablation,
            },
            focal_tversky: self.focal_tversky,
            thresholds: self.thresholds,
            validate_each_epoch: self.validate_each_epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let cfg = RunConfig::default();
        for (k, d, _) in KEYS {
            assert_eq!(&cfg.get(k).unwrap(), d, "{k}");
        }
        assert_eq!(cfg.schedule(), TrainingSchedule::default());
        assert_eq!(cfg.model_config(), ModelConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let text = "# tiny run\nbackbone.name = tiny\ninput_size = 64 # inline\nheads.cls_widths = 32\nunet.depth=3\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.backbone, BackboneKind::Tiny);
        assert_eq!(cfg.input_size, 64);
        assert_eq!(cfg.cls_widths, vec![32]);
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_str("bakbone.name = tiny\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "bakbone.name"));
        assert!(err.to_string().contains("bakbone.name"));
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, key) in [
            ("train.lr = fast", "train.lr"),
            ("backbone.name = alexnet", "backbone.name"),
            ("input_size = 100", "input_size"),
            ("dataset.train_fraction = 1.5", "dataset.train_fraction"),
        ] {
            let err = RunConfig::parse_str(text).unwrap_err();
            assert!(matches!(&err, Error::ConfigValue { key: k, .. } if k == key), "{text}: {err}");
        }
        assert!(matches!(RunConfig::parse_str("no equals sign"), Err(Error::ConfigSyntax { line: 1, .. })));
        assert!(RunConfig::parse_str("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for (k, _, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
