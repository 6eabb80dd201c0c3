//! Scoring an oracle and a noisy predictor with the evaluation pipeline.

use candle_core::Tensor;
use colonnet::dataset::{BoundingBox, ImageSample};
use colonnet::metrics::{box_iou, dice_coefficient, evaluate, mask_iou, EvalThresholds};
use colonnet::synthgen::{generate, SynthConfig};
use colonnet::{Prediction, Predictor};

/// Returns the ground truth, shifted by `offset` pixels for a worse score.
struct Oracle<'a> {
    samples: &'a [ImageSample],
    offset: usize,
}

impl Predictor for Oracle<'_> {
    fn input_size(&self) -> usize {
        64
    }

    fn predict_batch(&self, _batch: &Tensor) -> colonnet::Result<Vec<Prediction>> {
        unreachable!("predict_samples is overridden")
    }

    fn predict_samples(&self, samples: &[ImageSample]) -> colonnet::Result<Vec<Prediction>> {
        assert_eq!(samples.len(), self.samples.len());
        Ok(samples
            .iter()
            .map(|s| {
                let mask = s.segmentation_target().unwrap_or_else(|| ndarray::Array2::zeros((s.height(), s.width())));
                let mut probs = mask.mapv(f32::from);
                let original = probs.clone();
                for ((r, c), v) in probs.indexed_iter_mut() {
                    *v = if c >= self.offset { original[[r, c - self.offset]] } else { 0.0 };
                }
                let d = self.offset as f64 / 64.0;
                let bbox = s.bbox.map_or(BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 0.1, y_max: 0.1 }, |b| BoundingBox {
                    x_min: (b.x_min + d).min(1.0),
                    x_max: (b.x_max + d).min(1.0),
                    ..b
                });
                Prediction { bleed_prob: if s.label.is_bleeding() { 0.9 } else { 0.1 }, bbox, mask_probs: probs }
            })
            .collect())
    }
}

fn main() -> colonnet::Result<()> {
    let samples = generate(&SynthConfig::new(40, 3))?;
    for offset in [0, 3] {
        let report = evaluate(&Oracle { samples: &samples, offset }, &samples, &EvalThresholds::default())?;
        println!("shift {offset} px");
        print!("{}", report.to_table());
    }

    let a = ndarray::array![[1u8, 1, 0], [0, 1, 0]];
    let b = ndarray::array![[1u8, 0, 0], [0, 1, 1]];
    let (d, j) = (dice_coefficient(&a, &b)?, mask_iou(&a, &b)?);
    println!("dice {d:.4}, iou {j:.4}, 2j/(1+j) {:.4}", 2.0 * j / (1.0 + j));
    let p = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 0.5, y_max: 0.5 };
    let t = BoundingBox { x_min: 0.25, y_min: 0.25, x_max: 0.75, y_max: 0.75 };
    println!("box iou {:.4}", box_iou(&p, &t));
    Ok(())
}
