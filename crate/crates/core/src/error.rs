use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("annotations.csv line {line}: unknown image id {id:?}")]
    UnknownAnnotationId { line: u64, id: String },
    #[error("annotations.csv line {line}: {message}")]
    Annotation { line: u64, message: String },
    #[error("invalid bounding box for {id:?}: {reason}")]
    InvalidBox { id: String, reason: String },
    #[error("mask size mismatch for {id:?}: image is {image:?}, mask is {mask:?}")]
    MaskSizeMismatch { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error("need at least two samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rotation requires a square image, got {height}x{width}")]
    NonSquare { height: usize, width: usize },
    #[error("unknown backbone {name:?}; registered backbones: {registry}")]
    UnknownBackbone { name: String, registry: String },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("the detection stage needs at least one bleeding sample with a bounding box")]
    NoDetectionSamples,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("every sample was skipped by the segmentation stage (bleeding samples need masks)")]
    AllSamplesSkipped,
    #[error("no annotated bleeding samples to score detection and segmentation")]
    NoLocalizationTargets,
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("config key {key:?}: {message}")]
    ConfigValue { key: String, message: String },
    #[error("parameters of frozen component {component} changed during stage {stage}")]
    FreezeViolated { stage: String, component: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
