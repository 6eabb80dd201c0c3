//! Staged training of the tiny model on synthetic data.
//!
//!     cargo run --release --example train_tiny -- [n_samples] [det cls seg epochs]

use colonnet::backbone::{BackboneKind, BackboneSpec};
use colonnet::dataset::split_dataset;
use colonnet::heads::HeadConfig;
use colonnet::synthgen::{generate, SynthConfig};
use colonnet::trainer::{run_full_schedule, TrainingSchedule};
use colonnet::unet::UNetConfig;
use colonnet::{ColonNet, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let n = args.first().copied().unwrap_or(200);
    let epochs = match args.get(1..4) {
        Some(e) => (e[0], e[1], e[2]),
        None => (5, 5, 5),
    };

    let samples = generate(&SynthConfig::new(n, 0))?;
    let (train, val) = split_dataset(samples, 0.8, 0)?;
    let config = ModelConfig {
        backbone: BackboneSpec::new(BackboneKind::Tiny, 64),
        heads: HeadConfig { cls_hidden_widths: vec![64], det_hidden_widths: vec![128, 64, 32] },
        unet: UNetConfig { depth: 3, base_channels: 8, input_size: 64 },
    };
    let model = ColonNet::new(&config, 0)?;
    let mut schedule = TrainingSchedule::with_epochs(epochs.0, epochs.1, epochs.2);
    schedule.optimizer.learning_rate = 1e-3;
    schedule.augmentation.target_size = 64;

    let report = run_full_schedule(&model, &train, &val, &schedule)?;
    for stage in &report.stages {
        let losses = stage.losses();
        println!(
            "{:<14} {} samples, loss {:.4} -> {:.4}",
            stage.name.as_str(),
            stage.participants,
            losses.first().unwrap_or(&f64::NAN),
            losses.last().unwrap_or(&f64::NAN)
        );
    }
    if let Some(m) = report.final_metrics {
        print!("{}", m.to_table());
    }
    Ok(())
}
