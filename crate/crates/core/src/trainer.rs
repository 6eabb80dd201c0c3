//! Staged training: detection, then classification with a frozen backbone, then
//! the independent segmentation branch.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, images_to_tensor, masks_to_tensor, AugmentationConfig, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{bce_loss_t, focal_tversky_loss_t, mse_loss_t, FocalTverskyConfig};
use crate::metrics::{evaluate, EvalThresholds, MetricsReport};
use crate::model::{Checksums, ColonNet, Component};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Detection,
    Classification,
    Segmentation,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Detection => "detection",
            StageName::Classification => "classification",
            StageName::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFilter {
    BleedingOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
    FocalTversky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub epochs: usize,
    pub sample_filter: SampleFilter,
    pub loss: LossKind,
    pub trained: BTreeSet<Component>,
    pub frozen: BTreeSet<Component>,
    /// Overrides the optimizer learning rate for this stage.
    pub learning_rate: Option<f64>,
}

impl StageSpec {
    /// Bleeding samples only, MSE on the boxes. Trains the backbone unless `train_backbone` is false.
    pub fn detection(epochs: usize, train_backbone: bool) -> Self {
        let mut trained = BTreeSet::from([Component::DetectionHead]);
        let mut frozen = BTreeSet::from([Component::ClassificationHead, Component::Unet]);
        if train_backbone {
            trained.insert(Component::Backbone);
        } else {
            frozen.insert(Component::Backbone);
        }
        Self {
            name: StageName::Detection,
            epochs,
            sample_filter: SampleFilter::BleedingOnly,
            loss: LossKind::Mse,
            trained,
            frozen,
            learning_rate: None,
        }
    }

    /// All samples, BCE, only the classification head trains.
    pub fn classification(epochs: usize) -> Self {
        Self {
            name: StageName::Classification,
            epochs,
            sample_filter: SampleFilter::All,
            loss: LossKind::Bce,
            trained: BTreeSet::from([Component::ClassificationHead]),
            frozen: BTreeSet::from([Component::Backbone, Component::DetectionHead, Component::Unet]),
            learning_rate: None,
        }
    }

    /// All samples, Focal Tversky, only the U-Net trains.
    pub fn segmentation(epochs: usize) -> Self {
        Self {
            name: StageName::Segmentation,
            epochs,
            sample_filter: SampleFilter::All,
            loss: LossKind::FocalTversky,
            trained: BTreeSet::from([Component::Unet]),
            frozen: BTreeSet::from([Component::Backbone, Component::ClassificationHead, Component::DetectionHead]),
            learning_rate: None,
        }
    }

    pub fn with_learning_rate(mut self, lr: Option<f64>) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.name {
            StageName::Detection => (SampleFilter::BleedingOnly, LossKind::Mse),
            StageName::Classification => (SampleFilter::All, LossKind::Bce),
            StageName::Segmentation => (SampleFilter::All, LossKind::FocalTversky),
        };
        if (self.sample_filter, self.loss) != expected {
            return Err(Error::InvalidArgument(format!(
                "stage {} must use filter {:?} and loss {:?}",
                self.name, expected.0, expected.1
            )));
        }
        if self.trained.is_empty() {
            return Err(Error::InvalidArgument(format!("stage {} trains nothing", self.name)));
        }
        if let Some(c) = self.trained.intersection(&self.frozen).next() {
            return Err(Error::InvalidArgument(format!("stage {}: {c} is both trained and frozen", self.name)));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("stage {}: learning rate must be positive", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { method: OptimizerKind::Adam, learning_rate: 1e-4, batch_size: 16, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub stages: Vec<StageSpec>,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub focal_tversky: FocalTverskyConfig,
    pub thresholds: EvalThresholds,
    /// Score the validation split after every epoch instead of only after each stage.
    pub validate_each_epoch: bool,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self::with_epochs(10, 20, 40)
    }
}

impl TrainingSchedule {
    /// Detection, classification, segmentation with the given epoch counts.
    pub fn with_epochs(detection: usize, classification: usize, segmentation: usize) -> Self {
        Self {
            stages: vec![
                StageSpec::detection(detection, true),
                StageSpec::classification(classification),
                StageSpec::segmentation(segmentation),
            ],
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
            focal_tversky: FocalTverskyConfig::default(),
            thresholds: EvalThresholds::default(),
            validate_each_epoch: false,
        }
    }

    pub fn stage(&self, name: StageName) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("schedule has no stages".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        self.focal_tversky.validate()
    }
}

/// Sees every batch before augmentation, e.g. to audit stage filtering.
pub trait BatchObserver {
    fn on_batch(&mut self, stage: StageName, epoch: usize, batch: &[&ImageSample]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Wall-clock seconds; not serialized.
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: StageName,
    pub epochs: usize,
    pub participants: usize,
    pub skipped: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trained: Vec<Component>,
    pub frozen: Vec<Component>,
    pub epoch_reports: Vec<EpochReport>,
    pub checksums_before: Checksums,
    pub checksums_after: Checksums,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
    /// Wall-clock seconds; not serialized.
    #[serde(skip)]
    pub seconds: f64,
}

impl StageReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epoch_reports.iter().map(|e| e.mean_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub stages: Vec<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<MetricsReport>,
    /// Wall-clock seconds; not serialized.
    #[serde(skip)]
    pub seconds: f64,
}

/// A failed schedule with the reports of the stages that did finish.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} completed stage(s): {source}", partial.stages.len())]
pub struct ScheduleError {
    pub partial: TrainingReport,
    #[source]
    pub source: Error,
}

/// Batch MSE between sigmoid box outputs and target corners; backbone in train mode.
pub fn detection_loss(model: &ColonNet, images: &Tensor, boxes: &Tensor, train_backbone: bool) -> Result<Tensor> {
    let mut features = model.backbone().forward_t(images, train_backbone)?;
    if !train_backbone {
        features = features.detach();
    }
    mse_loss_t(&model.heads().det_raw(&features)?, boxes)
}

/// Batch BCE on the bleeding probability. Features come from the backbone in
/// inference mode and are detached, so nothing upstream of the head changes.
pub fn classification_loss(model: &ColonNet, images: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let features = model.backbone().forward_t(images, false)?.detach();
    bce_loss_t(&model.heads().cls_prob(&features)?, labels)
}

/// Per-image Focal Tversky loss of the U-Net output against `B×1×S×S` targets.
pub fn segmentation_loss(model: &ColonNet, images: &Tensor, masks: &Tensor, cfg: &FocalTverskyConfig) -> Result<Tensor> {
    focal_tversky_loss_t(&model.unet().forward_t(images, true)?, masks, cfg)
}

/// The samples a stage trains on, with the number skipped.
pub fn stage_samples(stage: StageName, samples: &[ImageSample]) -> (Vec<ImageSample>, usize) {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for s in samples {
        match stage {
            StageName::Detection => {
                if s.label.is_bleeding() && s.bbox.is_some() {
                    kept.push(s.clone());
                }
            }
            StageName::Classification => kept.push(s.clone()),
            StageName::Segmentation => match s.segmentation_target() {
                Some(mask) => kept.push(ImageSample { mask: Some(mask), ..s.clone() }),
                None => {
                    warn!("sample {} is bleeding but has no mask; skipped for segmentation", s.id);
                    skipped += 1;
                }
            },
        }
    }
    (kept, skipped)
}

fn epoch_rng(seed: u64, stage: StageName, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64 + 1) << 32) | epoch as u64);
    rng
}

#[derive(Default)]
pub struct Trainer<'a> {
    observer: Option<&'a mut dyn BatchObserver>,
    validation: Option<&'a [ImageSample]>,
}

impl<'a> Trainer<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_observer(mut self, observer: &'a mut dyn BatchObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    /// Validation split scored after each stage (and each epoch if the schedule asks).
    pub fn with_validation(mut self, samples: &'a [ImageSample]) -> Self {
        self.validation = Some(samples);
        self
    }

    pub fn train_detection_stage(&mut self, model: &ColonNet, train: &[ImageSample], schedule: &TrainingSchedule) -> Result<StageReport> {
        self.run_named(StageName::Detection, model, train, schedule)
    }

    pub fn train_classification_stage(&mut self, model: &ColonNet, train: &[ImageSample], schedule: &TrainingSchedule) -> Result<StageReport> {
        self.run_named(StageName::Classification, model, train, schedule)
    }

    pub fn train_segmentation_stage(&mut self, model: &ColonNet, train: &[ImageSample], schedule: &TrainingSchedule) -> Result<StageReport> {
        self.run_named(StageName::Segmentation, model, train, schedule)
    }

    fn run_named(&mut self, name: StageName, model: &ColonNet, train: &[ImageSample], schedule: &TrainingSchedule) -> Result<StageReport> {
        let spec = schedule
            .stage(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("schedule has no {name} stage")))?;
        self.train_stage(model, &spec, train, schedule)
    }

    /// Runs one stage and checks that every frozen component is bit-identical afterwards.
    pub fn train_stage(
        &mut self,
        model: &ColonNet,
        spec: &StageSpec,
        train: &[ImageSample],
        schedule: &TrainingSchedule,
    ) -> Result<StageReport> {
        spec.validate()?;
        schedule.optimizer.validate()?;
        let size = model.config().input_size();
        if schedule.augmentation.target_size != size {
            return Err(Error::InvalidArgument(format!(
                "augmentation target_size {} differs from model input_size {size}",
                schedule.augmentation.target_size
            )));
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (samples, skipped) = stage_samples(spec.name, train);
        if samples.is_empty() {
            return Err(match spec.name {
                StageName::Detection => Error::NoDetectionSamples,
                StageName::Segmentation => Error::AllSamplesSkipped,
                StageName::Classification => Error::EmptyDataset,
            });
        }
        let started = Instant::now();
        let checksums_before = model.checksums()?;
        let lr = spec.learning_rate.unwrap_or(schedule.optimizer.learning_rate);
        let vars = spec.trained.iter().flat_map(|c| model.store(*c).vars()).collect();
        let mut opt = AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..ParamsAdamW::default() })?;
        let train_backbone = spec.trained.contains(&Component::Backbone);
        let batch_size = schedule.optimizer.batch_size;
        info!("{} stage: {} samples ({} skipped), {} epochs, lr {lr}", spec.name, samples.len(), skipped, spec.epochs);

        let mut epoch_reports = Vec::with_capacity(spec.epochs);
        for epoch in 0..spec.epochs {
            let epoch_start = Instant::now();
            let mut rng = epoch_rng(schedule.optimizer.seed, spec.name, epoch);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &samples[i]).collect();
                if let Some(obs) = self.observer.as_deref_mut() {
                    obs.on_batch(spec.name, epoch, &batch);
                }
                let aug = batch
                    .iter()
                    .map(|s| augment(s, &schedule.augmentation, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let images = images_to_tensor(&aug.iter().map(|s| &s.image).collect::<Vec<_>>(), &Device::Cpu)?;
                let loss = match spec.name {
                    StageName::Detection => {
                        let boxes: Vec<f32> = aug
                            .iter()
                            .flat_map(|s| s.bbox.expect("filtered to boxed samples").to_array().map(|v| v as f32))
                            .collect();
                        let boxes = Tensor::from_vec(boxes, (aug.len(), 4), &Device::Cpu)?;
                        detection_loss(model, &images, &boxes, train_backbone)?
                    }
                    StageName::Classification => {
                        let labels: Vec<f32> = aug.iter().map(|s| s.label.as_u8() as f32).collect();
                        let labels = Tensor::from_vec(labels, aug.len(), &Device::Cpu)?;
                        classification_loss(model, &images, &labels)?
                    }
                    StageName::Segmentation => {
                        let masks: Vec<_> = aug.iter().map(|s| s.mask.as_ref().expect("targets filled in")).collect();
                        let masks = masks_to_tensor(&masks, &Device::Cpu)?;
                        segmentation_loss(model, &images, &masks, &schedule.focal_tversky)?
                    }
                };
                opt.backward_step(&loss)?;
                total += loss.to_scalar::<f32>()? as f64 * batch.len() as f64;
            }
            let mean_loss = total / samples.len() as f64;
            let validation = if schedule.validate_each_epoch { self.validate(model, &schedule.thresholds)? } else { None };
            info!("{} epoch {}/{}: loss {mean_loss:.6}", spec.name, epoch + 1, spec.epochs);
            epoch_reports.push(EpochReport { epoch, mean_loss, seconds: epoch_start.elapsed().as_secs_f64(), validation });
        }

        let checksums_after = model.checksums()?;
        for c in &spec.frozen {
            if checksums_before[c] != checksums_after[c] {
                return Err(Error::FreezeViolated { stage: spec.name.to_string(), component: c.to_string() });
            }
        }
        let validation = self.validate(model, &schedule.thresholds)?;
        Ok(StageReport {
            name: spec.name,
            epochs: spec.epochs,
            participants: samples.len(),
            skipped,
            learning_rate: lr,
            batch_size,
            trained: spec.trained.iter().copied().collect(),
            frozen: spec.frozen.iter().copied().collect(),
            epoch_reports,
            checksums_before,
            checksums_after,
            validation,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn validate(&self, model: &ColonNet, thresholds: &EvalThresholds) -> Result<Option<MetricsReport>> {
        let Some(val) = self.validation else { return Ok(None) };
        match evaluate(model, val, thresholds) {
            Ok(m) => Ok(Some(m)),
            Err(e @ (Error::EmptyDataset | Error::NoLocalizationTargets)) => {
                warn!("validation skipped: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Runs every stage of `schedule` in order. On failure the reports of the
    /// completed stages are returned inside the error.
    pub fn run_full_schedule(
        &mut self,
        model: &ColonNet,
        train: &[ImageSample],
        schedule: &TrainingSchedule,
    ) -> std::result::Result<TrainingReport, ScheduleError> {
        let started = Instant::now();
        let mut report = TrainingReport {
            seed: schedule.optimizer.seed,
            train_samples: train.len(),
            val_samples: self.validation.map_or(0, <[_]>::len),
            stages: Vec::new(),
            final_metrics: None,
            seconds: 0.0,
        };
        if let Err(source) = schedule.validate() {
            return Err(ScheduleError { partial: report, source });
        }
        for spec in &schedule.stages {
            match self.train_stage(model, spec, train, schedule) {
                Ok(r) => report.stages.push(r),
                Err(e) => {
                    report.seconds = started.elapsed().as_secs_f64();
                    let source = Error::Stage { stage: spec.name.to_string(), source: Box::new(e) };
                    return Err(ScheduleError { partial: report, source });
                }
            }
        }
        report.final_metrics = report.stages.last().and_then(|s| s.validation);
        report.seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Convenience wrapper: full schedule with a validation split and no observer.
pub fn run_full_schedule(
    model: &ColonNet,
    train: &[ImageSample],
    val: &[ImageSample],
    schedule: &TrainingSchedule,
) -> std::result::Result<TrainingReport, ScheduleError> {
    Trainer::new().with_validation(val).run_full_schedule(model, train, schedule)
}
