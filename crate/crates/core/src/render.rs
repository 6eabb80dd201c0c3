//! Simple raster drawing for prediction artifacts.

use ndarray::{Array2, Array3};

use crate::dataset::BoundingBox;

/// Draws the box outline, `thickness` pixels wide, inside the box's pixel bounds.
pub fn draw_bbox(image: &Array3<f32>, bbox: &BoundingBox, color: [f32; 3], thickness: usize) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    if h == 0 || w == 0 {
        return out;
    }
    let (r0, c0, r1, c1) = bbox.pixel_bounds(h, w);
    let (r0, r1) = (r0.min(h - 1), r1.min(h - 1));
    let (c0, c1) = (c0.min(w - 1), c1.min(w - 1));
    let t = thickness.max(1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let edge = r < r0 + t || r + t > r1 || c < c0 + t || c + t > c1;
            if edge {
                for (ch, v) in color.iter().enumerate() {
                    out[[r, c, ch]] = *v;
                }
            }
        }
    }
    out
}

/// Binary mask as a 3-channel image (bleeding pixels white).
pub fn mask_to_rgb(mask: &Array2<u8>) -> Array3<f32> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((h, w, 3), |(r, c, _)| if mask[[r, c]] != 0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_only() {
        let img = Array3::zeros((10, 10, 3));
        let b = BoundingBox::new(0.2, 0.2, 0.8, 0.8).unwrap();
        let out = draw_bbox(&img, &b, [1.0, 0.0, 0.0], 1);
        assert_eq!(out[[2, 2, 0]], 1.0);
        assert_eq!(out[[7, 5, 0]], 1.0);
        assert_eq!(out[[5, 5, 0]], 0.0);
        assert_eq!(out[[1, 1, 0]], 0.0);
        assert_eq!(out[[2, 2, 1]], 0.0);
    }
}
