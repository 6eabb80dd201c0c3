//! Box-aware flips and rotations on one synthetic sample.

use colonnet::dataset::{augment, flip_horizontal, rotate90, AugmentationConfig, BoundingBox};
use colonnet::synthgen::{generate, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> colonnet::Result<()> {
    let sample = generate(&SynthConfig::new(4, 2))?
        .into_iter()
        .find(|s| s.label.is_bleeding())
        .expect("at least one bleeding sample");
    println!("original        bbox {:?}", sample.bbox);

    let flipped = flip_horizontal(&sample);
    println!("flip_horizontal bbox {:?}", flipped.bbox);
    println!("flip twice restores: {}", flip_horizontal(&flipped) == sample);

    let rotated = rotate90(&sample, 1)?;
    println!("rotate 90       bbox {:?}", rotated.bbox);
    let from_mask = rotated.mask.as_ref().and_then(BoundingBox::from_mask);
    println!("box still tight around mask: {}", from_mask == rotated.bbox);

    let cfg = AugmentationConfig { target_size: 64, ..AugmentationConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..4 {
        let a = augment(&sample, &cfg, &mut rng)?;
        println!("draw {i}: bbox {:?}", a.bbox);
    }
    Ok(())
}
