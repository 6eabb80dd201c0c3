//! Deterministic synthetic frames: textured mucosa-like backgrounds, some with a
//! red elliptical blob whose exact rasterization is the mask.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, ImageSample, Label};
use crate::error::{Error, Result};

pub use crate::dataset::write_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub bleeding_fraction: f64,
    /// Semi-axis range as a fraction of the image side.
    pub blob_radius_range: (f64, f64),
    pub seed: u64,
    /// Added to the background red channel inside the blob.
    pub red_margin: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            image_size: 64,
            bleeding_fraction: 0.5,
            blob_radius_range: (0.05, 0.3),
            seed: 0,
            red_margin: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_samples < 2 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        if self.image_size < 4 {
            return bad(format!("image_size must be at least 4, got {}", self.image_size));
        }
        if !(self.bleeding_fraction > 0.0 && self.bleeding_fraction < 1.0) {
            return bad(format!("bleeding_fraction must lie in (0,1), got {}", self.bleeding_fraction));
        }
        let (lo, hi) = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad(format!("blob_radius_range must satisfy 0 < min <= max < 0.5, got ({lo}, {hi})"));
        }
        if !(self.red_margin > 0.0 && self.red_margin <= 0.35) {
            return bad(format!("red_margin must lie in (0, 0.35], got {}", self.red_margin));
        }
        Ok(())
    }

    /// Number of bleeding samples: `round(n · fraction)`.
    pub fn bleeding_count(&self) -> usize {
        (self.n_samples as f64 * self.bleeding_fraction).round() as usize
    }
}

/// Rotated ellipse in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Radians, counter-clockwise from the x axis.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Pixel `(r, c)` is set iff its center lies inside the ellipse.
    pub fn rasterize(&self, size: usize) -> Array2<u8> {
        let s = size as f64;
        Array2::from_shape_fn((size, size), |(r, c)| {
            u8::from(self.contains((c as f64 + 0.5) / s, (r as f64 + 0.5) / s))
        })
    }
}

/// A generated sample plus the blob that produced it.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: ImageSample,
    pub blob: Option<Ellipse>,
}

pub fn generate(config: &SynthConfig) -> Result<Vec<ImageSample>> {
    Ok(generate_with_blobs(config)?.into_iter().map(|s| s.sample).collect())
}

pub fn generate_with_blobs(config: &SynthConfig) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let n = config.n_samples;
    let mut order: Vec<usize> = (0..n).collect();
    // Own stream: stream 0 with the same seed is what `split_dataset` shuffles with.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut bleeding = vec![false; n];
    for &i in &order[..config.bleeding_count()] {
        bleeding[i] = true;
    }
    Ok((0..n).map(|i| synth_one(config, i, bleeding[i])).collect())
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn synth_one(config: &SynthConfig, index: usize, bleeding: bool) -> SynthSample {
    let size = config.image_size;
    let mut rng = sample_rng(config.seed, index);
    let mut image = background(size, &mut rng);
    let id = format!("synth_{index:05}");
    if !bleeding {
        return SynthSample {
            sample: ImageSample {
                id,
                image,
                label: Label::NonBleeding,
                bbox: None,
                mask: Some(Array2::zeros((size, size))),
            },
            blob: None,
        };
    }

    let (blob, mask) = loop {
        let blob = draw_ellipse(config, &mut rng);
        let mask = blob.rasterize(size);
        if mask.iter().any(|&m| m != 0) {
            break (blob, mask);
        }
    };
    let tint: f32 = rng.random_range(0.0..0.05);
    for ((r, c), &m) in mask.indexed_iter() {
        if m != 0 {
            image[[r, c, 0]] = (image[[r, c, 0]] + config.red_margin).min(1.0);
            image[[r, c, 1]] = (image[[r, c, 1]] - 0.15 - tint).max(0.0);
            image[[r, c, 2]] = (image[[r, c, 2]] - 0.12 - tint).max(0.0);
        }
    }
    let bbox = BoundingBox::from_mask(&mask);
    SynthSample {
        sample: ImageSample { id, image, label: Label::Bleeding, bbox, mask: Some(mask) },
        blob: Some(blob),
    }
}

fn draw_ellipse(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Ellipse {
    let (lo, hi) = config.blob_radius_range;
    let rx = rng.random_range(lo..=hi);
    let ry = rng.random_range(lo..=hi);
    let extent = rx.max(ry);
    let cx = rng.random_range(extent..=1.0 - extent);
    let cy = rng.random_range(extent..=1.0 - extent);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    Ellipse { cx, cy, rx, ry, angle }
}

/// Pinkish base color with low-frequency folds and pixel noise. Red stays ≤ 0.62
/// so the blob tint never saturates at the default margin.
fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base = [
        rng.random_range(0.45f32..0.55),
        rng.random_range(0.28f32..0.38),
        rng.random_range(0.22f32..0.32),
    ];
    let fx = rng.random_range(1.0f32..4.0);
    let fy = rng.random_range(1.0f32..4.0);
    let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
    let noise = Normal::new(0.0f32, 0.015).expect("valid std");
    let s = size as f32;
    let mut image = Array3::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f32 + 0.5) / s, (r as f32 + 0.5) / s);
            let fold = 0.04 * (std::f32::consts::TAU * (fx * x + fy * y) + phase).sin();
            for ch in 0..3 {
                let n = noise.sample(rng).clamp(-0.03, 0.03);
                image[[r, c, ch]] = (base[ch] + fold + n).clamp(0.0, 1.0);
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleeding_set_independent_of_split() {
        let samples = generate(&SynthConfig::new(40, 0)).unwrap();
        let (_, val) = crate::dataset::split_dataset(samples, 0.8, 0).unwrap();
        assert!(val.iter().any(|s| s.label.is_bleeding()));
        assert!(val.iter().any(|s| !s.label.is_bleeding()));
    }

    #[test]
    fn bleeding_arity() {
        let s = generate(&SynthConfig::new(100, 3)).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.iter().filter(|x| x.label.is_bleeding()).count(), 50);
        let s = generate(&SynthConfig { bleeding_fraction: 0.6, ..SynthConfig::new(50, 0) }).unwrap();
        assert_eq!(s.iter().filter(|x| x.label.is_bleeding()).count(), 30);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SynthConfig::new(12, 7)).unwrap();
        let b = generate(&SynthConfig::new(12, 7)).unwrap();
        let c = generate(&SynthConfig::new(12, 8)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.bbox, y.bbox);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn boxes_are_tight() {
        for s in generate(&SynthConfig::new(40, 1)).unwrap() {
            let Some(b) = s.bbox else {
                assert!(!s.label.is_bleeding());
                assert!(s.mask.unwrap().iter().all(|&m| m == 0));
                continue;
            };
            let mask = s.mask.unwrap();
            let (r0, c0, r1, c1) = b.pixel_bounds(64, 64);
            assert!((r0..=r1).any(|r| mask[[r, c0]] == 1));
            assert!((r0..=r1).any(|r| mask[[r, c1]] == 1));
            assert!((c0..=c1).any(|c| mask[[r0, c]] == 1));
            assert!((c0..=c1).any(|c| mask[[r1, c]] == 1));
            let outside = mask.indexed_iter().any(|((r, c), &m)| m == 1 && (r < r0 || r > r1 || c < c0 || c > c1));
            assert!(!outside);
        }
    }

    #[test]
    fn red_margin_holds() {
        for s in generate(&SynthConfig::new(20, 2)).unwrap().into_iter().filter(|s| s.label.is_bleeding()) {
            let mask = s.mask.unwrap();
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for ((r, c), &m) in mask.indexed_iter() {
                if m == 1 {
                    inside += s.image[[r, c, 0]];
                    ni += 1;
                } else {
                    outside += s.image[[r, c, 0]];
                    no += 1;
                }
            }
            assert!(inside / ni as f32 - outside / no as f32 >= 0.25);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig::new(1, 0).validate().is_err());
        assert!(SynthConfig { bleeding_fraction: 1.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { blob_radius_range: (0.3, 0.2), ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { blob_radius_range: (0.1, 0.5), ..SynthConfig::default() }.validate().is_err());
    }
}
