//! The three training losses on small hand-made inputs.

use colonnet::losses::{bce_loss_batch, focal_tversky_loss, mse_loss, tversky_index, FocalTverskyConfig};

fn main() -> colonnet::Result<()> {
    let ft = FocalTverskyConfig::default();
    let truth = [1.0, 1.0, 0.0, 0.0];
    for pred in [[1.0, 1.0, 0.0, 0.0], [0.9, 0.6, 0.2, 0.1], [0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 1.0, 1.0]] {
        println!(
            "mask {pred:?}: tversky {:.4}, focal tversky {:.4}",
            tversky_index(&pred, &truth, &ft)?,
            focal_tversky_loss(&pred, &truth, &ft)?
        );
    }
    // Missing bleeding pixels costs more than over-predicting them (alpha > beta).
    let miss = focal_tversky_loss(&[1.0, 0.0, 0.0, 0.0], &truth, &ft)?;
    let extra = focal_tversky_loss(&[1.0, 1.0, 1.0, 0.0], &truth, &ft)?;
    println!("one missed pixel {miss:.4} vs one extra pixel {extra:.4}");

    println!("bce {:.4}", bce_loss_batch(&[0.9, 0.2, 0.7], &[1.0, 0.0, 1.0])?);
    println!("mse {:.4}", mse_loss(&[0.1, 0.2, 0.5, 0.6], &[0.0, 0.2, 0.4, 0.8])?);
    Ok(())
}
