//! The CLAHE + erosion + dilation preprocessing used for the contrast ablation.

use colonnet::dataset::{apply_contrast_ablation, clahe, write_rgb_png};
use colonnet::synthgen::{generate, SynthConfig};

fn spread(img: &ndarray::Array3<f32>) -> (f32, f32) {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    (lo, hi)
}

fn main() -> colonnet::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir)?;
    let sample = &generate(&SynthConfig::new(2, 11))?[0];
    let equalized = clahe(&sample.image);
    let ablated = apply_contrast_ablation(sample);
    println!("original  range {:?}", spread(&sample.image));
    println!("clahe     range {:?}", spread(&equalized));
    println!("ablation  range {:?}", spread(&ablated.image));
    println!("mask and box untouched: {}", ablated.mask == sample.mask && ablated.bbox == sample.bbox);
    write_rgb_png(&sample.image, &dir.join("original.png"))?;
    write_rgb_png(&ablated.image, &dir.join("ablated.png"))?;
    Ok(())
}
