//! Labeled frames, the on-disk dataset layout, the train/validation split and
//! geometry-consistent augmentation.

mod contrast;
mod io;
mod transform;

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contrast::{apply_contrast_ablation, clahe, dilate3x3, erode3x3};
pub use io::{load_dataset, read_image, read_mask, write_dataset, write_mask_png, write_rgb_png};
pub use transform::{augment, flip_horizontal, flip_vertical, resize, resize_image, resize_mask, rotate90};

/// Binary frame label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NonBleeding,
    Bleeding,
}

impl Label {
    pub fn is_bleeding(self) -> bool {
        matches!(self, Label::Bleeding)
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::NonBleeding),
            1 => Some(Label::Bleeding),
            _ => None,
        }
    }
}

impl From<bool> for Label {
    fn from(bleeding: bool) -> Self {
        if bleeding {
            Label::Bleeding
        } else {
            Label::NonBleeding
        }
    }
}

/// Axis-aligned box in normalized corner form, `0 ≤ min < max ≤ 1` on both axes.
///
/// A pixel `(row, col)` of a `H×W` image covers `[col/W, (col+1)/W] × [row/H, (row+1)/H]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate().map_err(|reason| Error::InvalidBox { id: String::new(), reason })?;
        Ok(b)
    }

    /// Checks the corner-form invariants, returning a human-readable reason on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(format!("coordinates must lie in [0,1], got {coords:?}"));
        }
        if self.x_max <= self.x_min {
            return Err(format!("x_max {} must exceed x_min {}", self.x_max, self.x_min));
        }
        if self.y_max <= self.y_min {
            return Err(format!("y_max {} must exceed y_min {}", self.y_max, self.y_min));
        }
        Ok(())
    }

    /// Builds a box from two arbitrary corners `(a, b)` and `(c, d)` by sorting each axis.
    ///
    /// Degenerate axes are widened by one part in 10⁶ so the strict ordering holds.
    pub fn from_unordered(a: f64, b: f64, c: f64, d: f64) -> Self {
        let clamp = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let (a, b, c, d) = (clamp(a), clamp(b), clamp(c), clamp(d));
        let (mut x_min, mut x_max) = (a.min(c), a.max(c));
        let (mut y_min, mut y_max) = (b.min(d), b.max(d));
        const GAP: f64 = 1e-6;
        if x_max - x_min < GAP {
            (x_min, x_max) = widen(x_min, GAP);
        }
        if y_max - y_min < GAP {
            (y_min, y_max) = widen(y_min, GAP);
        }
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Tight box around the nonzero pixels of a mask, or `None` for an empty mask.
    pub fn from_mask(mask: &Array2<u8>) -> Option<Self> {
        let (h, w) = mask.dim();
        let mut rows = (usize::MAX, 0usize);
        let mut cols = (usize::MAX, 0usize);
        for ((r, c), v) in mask.indexed_iter() {
            if *v != 0 {
                rows = (rows.0.min(r), rows.1.max(r));
                cols = (cols.0.min(c), cols.1.max(c));
            }
        }
        if rows.0 == usize::MAX {
            return None;
        }
        Some(Self {
            x_min: cols.0 as f64 / w as f64,
            y_min: rows.0 as f64 / h as f64,
            x_max: (cols.1 + 1) as f64 / w as f64,
            y_max: (rows.1 + 1) as f64 / h as f64,
        })
    }

    /// Pixel-index bounds `(row0, col0, row1, col1)` (inclusive) covered by the box on a `h×w` grid.
    pub fn pixel_bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let to_px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
        let (c0, c1) = (to_px(self.x_min, w), to_px(self.x_max, w));
        let (r0, r1) = (to_px(self.y_min, h), to_px(self.y_max, h));
        (r0, c0, r1.saturating_sub(1).max(r0), c1.saturating_sub(1).max(c0))
    }
}

fn widen(v: f64, gap: f64) -> (f64, f64) {
    if v + gap <= 1.0 {
        (v, v + gap)
    } else {
        (1.0 - gap, 1.0)
    }
}

/// One frame: an `H×W×3` image in `[0,1]`, its label, and optional box and mask annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Label,
    pub bbox: Option<BoundingBox>,
    /// `H×W` binary mask with values in `{0, 1}`.
    pub mask: Option<Array2<u8>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Checks every sample invariant.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::Shape { expected: "3 channels".into(), actual: format!("{c}") });
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("image {} has values outside [0,1]", self.id)));
        }
        if let Some(b) = &self.bbox {
            if !self.label.is_bleeding() {
                return Err(Error::InvalidBox {
                    id: self.id.clone(),
                    reason: "bounding box on a non-bleeding sample".into(),
                });
            }
            b.validate().map_err(|reason| Error::InvalidBox { id: self.id.clone(), reason })?;
        }
        if let Some(m) = &self.mask {
            if m.dim() != (h, w) {
                return Err(Error::MaskSizeMismatch { id: self.id.clone(), image: (h, w), mask: m.dim() });
            }
            if m.iter().any(|v| *v > 1) {
                return Err(Error::InvalidArgument(format!("mask {} is not binary", self.id)));
            }
        }
        Ok(())
    }

    /// The segmentation target: the mask if present, all zeros for a non-bleeding
    /// sample without one, `None` for a bleeding sample without one.
    pub fn segmentation_target(&self) -> Option<Array2<u8>> {
        match (&self.mask, self.label) {
            (Some(m), _) => Some(m.clone()),
            (None, Label::NonBleeding) => Some(Array2::zeros((self.height(), self.width()))),
            (None, Label::Bleeding) => None,
        }
    }
}

/// Augmentation knobs. Rotations are restricted to multiples of 90°.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rotation_choices: Vec<u32>,
    pub target_size: usize,
    pub ablation_contrast: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotation_choices: vec![0, 90, 180, 270],
            target_size: 224,
            ablation_contrast: false,
        }
    }
}

impl AugmentationConfig {
    /// No flips or rotations; only the final resize.
    pub fn resize_only(target_size: usize) -> Self {
        Self {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotation_choices: vec![0],
            target_size,
            ablation_contrast: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.target_size == 0 {
            return Err(Error::InvalidArgument("target_size must be positive".into()));
        }
        if self.rotation_choices.is_empty() {
            return Err(Error::InvalidArgument("rotation_choices must not be empty".into()));
        }
        if let Some(r) = self.rotation_choices.iter().find(|r| **r % 90 != 0) {
            return Err(Error::InvalidArgument(format!("rotation {r} is not a multiple of 90")));
        }
        Ok(())
    }
}

/// Seeded shuffle and split into `(train, val)` with `|train| = round(fraction · N)`.
///
/// The train size is clamped to `[1, N-1]` so neither side is empty.
pub fn split_dataset(
    samples: Vec<ImageSample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let n_train = split_sizes(n, train_fraction).0;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<ImageSample>> = samples.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index drawn once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let val = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok((train, val))
}

/// `(train, val)` sizes produced by [`split_dataset`].
pub fn split_sizes(n: usize, train_fraction: f64) -> (usize, usize) {
    let t = ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    (t, n - t)
}

/// Stacks images into a `B×3×H×W` tensor. All images must share one size.
pub fn images_to_tensor(samples: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptyDataset);
    };
    let (h, w, _) = first.dim();
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for img in samples {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape {
                expected: format!("{h}x{w}x3"),
                actual: format!("{:?}", img.dim()),
            });
        }
        for c in 0..3 {
            data.extend(img.index_axis(ndarray::Axis(2), c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?)
}

/// Stacks binary masks into a `B×1×H×W` f32 tensor.
pub fn masks_to_tensor(masks: &[&Array2<u8>], device: &Device) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::EmptyDataset);
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::Shape { expected: format!("{h}x{w}"), actual: format!("{:?}", m.dim()) });
        }
        data.extend(m.iter().map(|v| *v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample(i: usize) -> ImageSample {
        ImageSample {
            id: format!("s{i:03}"),
            image: Array3::zeros((4, 4, 3)),
            label: Label::NonBleeding,
            bbox: None,
            mask: None,
        }
    }

    #[test]
    fn split_ten_samples() {
        let samples: Vec<_> = (0..10).map(sample).collect();
        let (train, val) = split_dataset(samples.clone(), 0.8, 7).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let (train2, val2) = split_dataset(samples, 0.8, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        for v in &val {
            assert!(!train.iter().any(|t| t.id == v.id));
        }
    }

    #[test]
    fn split_sizes_for_full_training_set() {
        assert_eq!(split_sizes(2618, 0.8), (2094, 524));
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        assert!(matches!(split_dataset(vec![sample(0)], 0.8, 0), Err(Error::TooFewSamples(1))));
        assert!(split_dataset(vec![sample(0), sample(1)], 1.0, 0).is_err());
        let (t, v) = split_dataset(vec![sample(0), sample(1)], 0.99, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn box_from_unordered_sorts_corners() {
        let b = BoundingBox::from_unordered(0.4, 0.2, 0.1, 0.6);
        assert_eq!(b.to_array(), [0.1, 0.2, 0.4, 0.6]);
        let d = BoundingBox::from_unordered(0.5, 1.0, 0.5, 1.0);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn box_rejects_inverted_corners() {
        assert!(BoundingBox::new(0.4, 0.2, 0.1, 0.6).is_err());
        assert!(BoundingBox::new(0.1, 0.2, 0.4, 1.2).is_err());
    }

    #[test]
    fn tight_box_from_mask() {
        let mut m = Array2::<u8>::zeros((10, 20));
        m[[2, 5]] = 1;
        m[[4, 9]] = 1;
        let b = BoundingBox::from_mask(&m).unwrap();
        assert_eq!(b.to_array(), [5.0 / 20.0, 0.2, 10.0 / 20.0, 0.5]);
        assert_eq!(b.pixel_bounds(10, 20), (2, 5, 4, 9));
        assert!(BoundingBox::from_mask(&Array2::zeros((3, 3))).is_none());
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let mut img = Array3::<f32>::zeros((2, 2, 3));
        img[[0, 1, 2]] = 0.5;
        let t = images_to_tensor(&[&img], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let v: f32 = t.get(0).unwrap().get(2).unwrap().get(0).unwrap().get(1).unwrap().to_scalar().unwrap();
        assert_eq!(v, 0.5);
    }
}
