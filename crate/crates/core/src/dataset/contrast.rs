//! Contrast-limited local histogram equalization followed by a 3×3 opening.
//! Kept as an opt-in ablation; it is not part of the default pipeline.

use ndarray::{Array2, Array3, Axis};

use super::ImageSample;

const BINS: usize = 256;
const GRID: usize = 8;
const CLIP_LIMIT: f64 = 2.0;

fn to_bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round()) as usize
}

/// Per-tile lookup table. Tiles with a single occupied bin map to the identity.
fn tile_lut(plane: &Array2<f32>, rows: (usize, usize), cols: (usize, usize)) -> Vec<f32> {
    let mut hist = [0f64; BINS];
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            hist[to_bin(plane[[r, c]])] += 1.0;
        }
    }
    let n: f64 = hist.iter().sum();
    let occupied: Vec<usize> = (0..BINS).filter(|b| hist[*b] > 0.0).collect();
    if occupied.len() <= 1 {
        return (0..BINS).map(|b| b as f32 / (BINS - 1) as f32).collect();
    }
    let (lo, hi) = (occupied[0], *occupied.last().expect("non-empty"));
    // Clip and spread the excess over the occupied range.
    let limit = (CLIP_LIMIT * n / (hi - lo + 1) as f64).max(1.0);
    let mut excess = 0.0;
    for h in hist[lo..=hi].iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / (hi - lo + 1) as f64;
    for h in hist[lo..=hi].iter_mut() {
        *h += share;
    }
    let mut cdf = [0f64; BINS];
    let mut acc = 0.0;
    for b in 0..BINS {
        acc += hist[b];
        cdf[b] = acc;
    }
    let base = cdf[lo];
    let span = (cdf[hi] - base).max(f64::MIN_POSITIVE);
    (0..BINS)
        .map(|b| {
            if b <= lo {
                0.0
            } else {
                (((cdf[b.min(hi)] - base) / span) as f32).clamp(0.0, 1.0)
            }
        })
        .collect()
}

fn equalize_plane(plane: &Array2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let gy = GRID.min(h).max(1);
    let gx = GRID.min(w).max(1);
    let bounds = |i: usize, g: usize, n: usize| (i * n / g, (i + 1) * n / g);
    let luts: Vec<Vec<Vec<f32>>> = (0..gy)
        .map(|ty| (0..gx).map(|tx| tile_lut(plane, bounds(ty, gy, h), bounds(tx, gx, w))).collect())
        .collect();
    // Bilinear blend between the four nearest tile centers.
    let locate = |p: usize, g: usize, n: usize| -> (usize, usize, f32) {
        let tile = n as f32 / g as f32;
        let t = ((p as f32 + 0.5) / tile - 0.5).clamp(0.0, (g - 1) as f32);
        let i0 = t.floor() as usize;
        (i0, (i0 + 1).min(g - 1), t - i0 as f32)
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let b = to_bin(plane[[r, c]]);
        let (y0, y1, fy) = locate(r, gy, h);
        let (x0, x1, fx) = locate(c, gx, w);
        let top = luts[y0][x0][b] * (1.0 - fx) + luts[y0][x1][b] * fx;
        let bottom = luts[y1][x0][b] * (1.0 - fx) + luts[y1][x1][b] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Contrast-limited adaptive histogram equalization on each channel independently.
pub fn clahe(image: &Array3<f32>) -> Array3<f32> {
    let mut out = image.clone();
    for (mut dst, src) in out.axis_iter_mut(Axis(2)).zip(image.axis_iter(Axis(2))) {
        dst.assign(&equalize_plane(&src.to_owned()));
    }
    out
}

fn filter3x3(image: &Array3<f32>, pick: fn(f32, f32) -> f32) -> Array3<f32> {
    let (h, w, ch) = image.dim();
    Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
        let mut acc = image[[r, c, k]];
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                acc = pick(acc, image[[rr, cc, k]]);
            }
        }
        acc
    })
}

/// 3×3 minimum filter; out-of-frame neighbors are ignored.
pub fn erode3x3(image: &Array3<f32>) -> Array3<f32> {
    filter3x3(image, f32::min)
}

/// 3×3 maximum filter; out-of-frame neighbors are ignored.
pub fn dilate3x3(image: &Array3<f32>) -> Array3<f32> {
    filter3x3(image, f32::max)
}

/// Equalization, then erosion, then dilation, on the image only.
pub fn apply_contrast_ablation(sample: &ImageSample) -> ImageSample {
    let image = dilate3x3(&erode3x3(&clahe(&sample.image)));
    ImageSample { image, ..sample.clone() }
}
