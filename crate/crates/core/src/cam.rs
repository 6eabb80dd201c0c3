//! Gradient-weighted class activation maps over the final backbone feature map.

use candle_core::{Device, Tensor, Var};
use ndarray::{Array2, Array3, Axis};

use crate::dataset::{images_to_tensor, resize_image};
use crate::error::{Error, Result};
use crate::model::{ColonNet, Component};

/// A CAM at feature resolution and resampled to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `h×w`, in `[0,1]`.
    pub values: Array2<f32>,
    /// `H×W`, in `[0,1]`.
    pub upsampled: Array2<f32>,
}

/// Min-max scaling to `[0,1]`; a constant map becomes all zeros.
pub fn normalize(map: &Array2<f32>) -> Array2<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// CAM from `C×h×w` features and the gradient of the class score with respect to them:
/// spatial-mean gradients weight the channels, the weighted sum is rectified, then normalized.
pub fn grad_cam(features: &Array3<f32>, grads: &Array3<f32>) -> Result<Array2<f32>> {
    if features.dim() != grads.dim() {
        return Err(Error::Shape { expected: format!("{:?}", features.dim()), actual: format!("{:?}", grads.dim()) });
    }
    let weights = grads.mean_axis(Axis(1)).and_then(|m| m.mean_axis(Axis(1))).ok_or(Error::EmptyDataset)?;
    let (_, h, w) = features.dim();
    let mut cam = Array2::<f32>::zeros((h, w));
    for (c, &wc) in weights.iter().enumerate() {
        cam.scaled_add(wc, &features.index_axis(Axis(0), c));
    }
    Ok(normalize(&cam.mapv(|v| v.max(0.0))))
}

/// Bilinear (half-pixel) resampling of a 2-D map.
pub fn upsample(map: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let lifted = map.clone().insert_axis(Axis(2));
    resize_image(&lifted, h, w).index_axis_move(Axis(2), 0)
}

fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("dims match"))
}

/// CAM for the bleeding class of one `H×W×3` image, computed in inference mode.
///
/// Fails if the classification head still holds its initial parameters.
pub fn compute_cam(model: &ColonNet, image: &Array3<f32>) -> Result<Heatmap> {
    if model.is_untrained(Component::ClassificationHead)? {
        return Err(Error::InvalidArgument("classification head is untrained; CAM needs a trained checkpoint".into()));
    }
    compute_cam_unchecked(model, image)
}

/// [`compute_cam`] without the trained-head check.
pub fn compute_cam_unchecked(model: &ColonNet, image: &Array3<f32>) -> Result<Heatmap> {
    let (h, w, _) = image.dim();
    let s = model.config().input_size();
    let resized = resize_image(image, s, s);
    let batch = images_to_tensor(&[&resized], &Device::Cpu)?;
    let features = Var::from_tensor(&model.backbone().forward_t(&batch, false)?.detach())?;
    let logit = model.heads().cls_logit(features.as_tensor())?.sum_all()?;
    let grads = logit.backward()?;
    let g = grads
        .get(features.as_tensor())
        .ok_or_else(|| Error::InvalidArgument("classification score does not depend on the features".into()))?;
    let values = grad_cam(&to_array3(&features.as_tensor().get(0)?)?, &to_array3(&g.get(0)?)?)?;
    let upsampled = upsample(&values, h, w).mapv(|v| v.clamp(0.0, 1.0));
    Ok(Heatmap { values, upsampled })
}

/// Jet colormap: blue (0) through green to red (1).
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Alpha-blends the color-mapped heatmap over an `H×W×3` image.
pub fn overlay(image: &Array3<f32>, heatmap: &Array2<f32>, alpha: f32) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if heatmap.dim() != (h, w) || c != 3 {
        return Err(Error::Shape { expected: format!("{h}×{w} heatmap on RGB"), actual: format!("{:?} on {c} channels", heatmap.dim()) });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let mut out = image.clone();
    for ((r, col), &v) in heatmap.indexed_iter() {
        let color = jet(v);
        for ch in 0..3 {
            out[[r, col, ch]] = (1.0 - alpha) * image[[r, col, ch]] + alpha * color[ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_channel_unit_weight() {
        let f = array![[[1.0f32, -2.0], [3.0, 5.0]]];
        let g = Array3::from_elem((1, 2, 2), 1.0f32);
        let cam = grad_cam(&f, &g).unwrap();
        // rectified [[1,0],[3,5]] scaled by min 0, max 5
        let expected = array![[0.2f32, 0.0], [0.6, 1.0]];
        for (a, b) in cam.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_evidence_is_zero_map() {
        let f = Array3::from_elem((2, 2, 2), 1.0f32);
        let g = Array3::from_elem((2, 2, 2), -1.0f32);
        assert!(grad_cam(&f, &g).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = array![[0.3f32, 2.0], [-1.0, 0.5]];
        let once = normalize(&m);
        assert_eq!(normalize(&once), once);
        assert_eq!(once.iter().copied().fold(f32::MAX, f32::min), 0.0);
        assert_eq!(once.iter().copied().fold(f32::MIN, f32::max), 1.0);
    }

    #[test]
    fn overlay_extremes() {
        let img = Array3::from_shape_fn((4, 5, 3), |(r, c, ch)| (r + c + ch) as f32 / 12.0);
        let heat = Array2::from_shape_fn((4, 5), |(r, c)| (r * 5 + c) as f32 / 19.0);
        assert_eq!(overlay(&img, &heat, 0.0).unwrap(), img);
        let pure = overlay(&img, &heat, 1.0).unwrap();
        assert_eq!(pure.dim(), (4, 5, 3));
        for ((r, c), &v) in heat.indexed_iter() {
            let j = jet(v);
            for ch in 0..3 {
                assert_eq!(pure[[r, c, ch]], j[ch]);
            }
        }
        assert!(overlay(&img, &Array2::zeros((2, 2)), 0.5).is_err());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }
}
