use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::{apply_contrast_ablation, AugmentationConfig, BoundingBox, ImageSample};
use crate::error::{Error, Result};

/// Mirrors columns: pixel column `c` moves to `W-1-c`.
pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        image: sample.image.slice(s![.., ..;-1, ..]).to_owned(),
        label: sample.label,
        bbox: sample.bbox.map(|b| BoundingBox {
            x_min: 1.0 - b.x_max,
            y_min: b.y_min,
            x_max: 1.0 - b.x_min,
            y_max: b.y_max,
        }),
        mask: sample.mask.as_ref().map(|m| m.slice(s![.., ..;-1]).to_owned()),
    }
}

/// Mirrors rows: pixel row `r` moves to `H-1-r`.
pub fn flip_vertical(sample: &ImageSample) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        image: sample.image.slice(s![..;-1, .., ..]).to_owned(),
        label: sample.label,
        bbox: sample.bbox.map(|b| BoundingBox {
            x_min: b.x_min,
            y_min: 1.0 - b.y_max,
            x_max: b.x_max,
            y_max: 1.0 - b.y_min,
        }),
        mask: sample.mask.as_ref().map(|m| m.slice(s![..;-1, ..]).to_owned()),
    }
}

fn rot_image_ccw(img: &Array3<f32>) -> Array3<f32> {
    img.view().permuted_axes([1, 0, 2]).slice(s![..;-1, .., ..]).to_owned()
}

fn rot_mask_ccw(m: &Array2<u8>) -> Array2<u8> {
    m.view().reversed_axes().slice(s![..;-1, ..]).to_owned()
}

/// Rotates `k` quarter turns counter-clockwise. Normalized points map as `(x, y) → (y, 1-x)`
/// per quarter turn.
pub fn rotate90(sample: &ImageSample, k: u32) -> Result<ImageSample> {
    let (h, w) = (sample.height(), sample.width());
    if h != w {
        return Err(Error::NonSquare { height: h, width: w });
    }
    let mut out = sample.clone();
    for _ in 0..k % 4 {
        out.image = rot_image_ccw(&out.image);
        out.mask = out.mask.as_ref().map(rot_mask_ccw);
        out.bbox = out.bbox.map(|b| BoundingBox {
            x_min: b.y_min,
            y_min: 1.0 - b.x_max,
            x_max: b.y_max,
            y_max: 1.0 - b.x_min,
        });
    }
    Ok(out)
}

/// Half-pixel-centered source coordinate for output index `dst`.
fn source_coord(dst: usize, n_in: usize, n_out: usize) -> f64 {
    let scale = n_in as f64 / n_out as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Bilinear resampling to `out_h × out_w` with half-pixel centers.
pub fn resize_image(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|d| {
                let s = source_coord(d, n_in, n_out);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bottom = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Nearest-neighbor resampling, preserving binarity.
pub fn resize_mask(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    let pick = |d: usize, n_in: usize, n_out: usize| {
        (((d as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(r, c)| mask[[pick(r, h, out_h), pick(c, w, out_w)]])
}

/// Resamples to `target_size × target_size`. Normalized boxes are unchanged.
pub fn resize(sample: &ImageSample, target_size: usize) -> Result<ImageSample> {
    if target_size == 0 {
        return Err(Error::InvalidArgument("target_size must be positive".into()));
    }
    Ok(ImageSample {
        id: sample.id.clone(),
        image: resize_image(&sample.image, target_size, target_size),
        label: sample.label,
        bbox: sample.bbox,
        mask: sample.mask.as_ref().map(|m| resize_mask(m, target_size, target_size)),
    })
}

/// Random flips and a quarter-turn rotation, applied identically to image, mask and box.
///
/// The sample is resized to the target size first so rotations always see a square
/// frame; bilinear resampling commutes with these maps, so the order does not change
/// the result for square inputs. Exactly three draws are taken from `rng` per call.
pub fn augment<R: Rng + ?Sized>(
    sample: &ImageSample,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<ImageSample> {
    config.validate()?;
    let flip_h = rng.random::<f64>() < config.flip_h_prob;
    let flip_v = rng.random::<f64>() < config.flip_v_prob;
    let rotation = config.rotation_choices[rng.random_range(0..config.rotation_choices.len())];

    let mut out = resize(sample, config.target_size)?;
    if flip_h {
        out = flip_horizontal(&out);
    }
    if flip_v {
        out = flip_vertical(&out);
    }
    out = rotate90(&out, (rotation / 90) % 4)?;
    if config.ablation_contrast {
        out = apply_contrast_ablation(&out);
    }
    Ok(out)
}
