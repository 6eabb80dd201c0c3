//! Briefly train the classification branch, then write a CAM overlay.
//!
//!     cargo run --release --example cam_heatmap -- /tmp/cam.png

use colonnet::backbone::{BackboneKind, BackboneSpec};
use colonnet::cam::{compute_cam, overlay};
use colonnet::dataset::write_rgb_png;
use colonnet::heads::HeadConfig;
use colonnet::synthgen::{generate, SynthConfig};
use colonnet::trainer::{StageSpec, Trainer, TrainingSchedule};
use colonnet::unet::UNetConfig;
use colonnet::{ColonNet, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "cam.png".into());
    let samples = generate(&SynthConfig::new(96, 5))?;
    let config = ModelConfig {
        backbone: BackboneSpec::new(BackboneKind::Tiny, 64),
        heads: HeadConfig { cls_hidden_widths: vec![64], det_hidden_widths: vec![32] },
        unet: UNetConfig { depth: 3, base_channels: 8, input_size: 64 },
    };
    let model = ColonNet::new(&config, 0)?;
    let mut schedule = TrainingSchedule::with_epochs(3, 5, 1);
    schedule.optimizer.learning_rate = 1e-3;
    schedule.augmentation.target_size = 64;
    let mut trainer = Trainer::new();
    for stage in [StageSpec::detection(3, true), StageSpec::classification(5)] {
        trainer.train_stage(&model, &stage, &samples, &schedule)?;
    }

    let sample = samples.iter().find(|s| s.label.is_bleeding()).expect("bleeding sample");
    let heatmap = compute_cam(&model, &sample.image)?;
    println!("feature-map heatmap {:?}, upsampled {:?}", heatmap.values.dim(), heatmap.upsampled.dim());
    println!("{:.2}", heatmap.values);
    write_rgb_png(&overlay(&sample.image, &heatmap.upsampled, 0.4)?, out.as_ref())?;
    println!("wrote {out} (true box {:?})", sample.bbox);
    Ok(())
}
