//! Directory layout:
//!
//! ```text
//! root/images/<id>.png      RGB frames
//! root/masks/<id>.png       8-bit masks, 0 or 255
//! root/annotations.csv      id,label,x_min,y_min,x_max,y_max
//! ```
//!
//! Box columns are empty for non-bleeding rows. Images without a row are
//! treated as non-bleeding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::Deserialize;

use super::{BoundingBox, ImageSample, Label};
use crate::error::{Error, Result};

pub const ANNOTATIONS_HEADER: [&str; 6] = ["id", "label", "x_min", "y_min", "x_max", "y_max"];

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    id: String,
    label: u8,
    x_min: Option<f64>,
    y_min: Option<f64>,
    x_max: Option<f64>,
    y_max: Option<f64>,
}

/// Reads an RGB PNG into an `H×W×3` array with values in `[0,1]`.
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        rgb.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
    }))
}

/// Reads an 8-bit mask; pixels ≥ 128 become 1.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        u8::from(gray.get_pixel(c as u32, r as u32)[0] >= 128)
    }))
}

pub fn write_rgb_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let px = |k: usize| (image[[r as usize, c as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Writes a binary mask as 0/255 grayscale.
pub fn write_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([if mask[[r as usize, c as usize]] != 0 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

fn png_ids(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn parse_row(row: &AnnotationRow, line: u64) -> Result<(Label, Option<BoundingBox>)> {
    let label = Label::from_u8(row.label).ok_or_else(|| Error::Annotation {
        line,
        message: format!("label must be 0 or 1, got {}", row.label),
    })?;
    let coords = [row.x_min, row.y_min, row.x_max, row.y_max];
    let bbox = match coords {
        [None, None, None, None] => None,
        [Some(x0), Some(y0), Some(x1), Some(y1)] => {
            let b = BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 };
            b.validate().map_err(|reason| Error::InvalidBox { id: row.id.clone(), reason })?;
            if !label.is_bleeding() {
                return Err(Error::InvalidBox {
                    id: row.id.clone(),
                    reason: "bounding box on a label-0 row".into(),
                });
            }
            Some(b)
        }
        _ => {
            return Err(Error::Annotation {
                line,
                message: format!("partial bounding box for {:?}", row.id),
            })
        }
    };
    Ok((label, bbox))
}

/// Loads every `images/<id>.png` under `root`, attaching masks and annotations by id.
/// Samples come back sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let images = png_ids(&root.join("images"))?;
    let masks = png_ids(&root.join("masks"))?;

    let mut annotations: BTreeMap<String, (Label, Option<BoundingBox>)> = BTreeMap::new();
    let csv_path = root.join("annotations.csv");
    if csv_path.is_file() {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&csv_path)?;
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let row: AnnotationRow = record.deserialize(Some(&csv::StringRecord::from(
                ANNOTATIONS_HEADER.to_vec(),
            )))?;
            if !images.contains_key(&row.id) {
                return Err(Error::UnknownAnnotationId { line, id: row.id });
            }
            let parsed = parse_row(&row, line)?;
            if annotations.insert(row.id.clone(), parsed).is_some() {
                return Err(Error::Annotation { line, message: format!("duplicate id {:?}", row.id) });
            }
        }
    }

    let mut samples = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let image = read_image(path)?;
        let mask = match masks.get(id) {
            Some(p) => {
                let m = read_mask(p)?;
                let (h, w, _) = image.dim();
                if m.dim() != (h, w) {
                    return Err(Error::MaskSizeMismatch { id: id.clone(), image: (h, w), mask: m.dim() });
                }
                Some(m)
            }
            None => None,
        };
        let (label, bbox) = annotations.get(id).copied().unwrap_or((Label::NonBleeding, None));
        samples.push(ImageSample { id: id.clone(), image, label, bbox, mask });
    }
    Ok(samples)
}

/// Writes samples in the layout [`load_dataset`] reads. Coordinates are written with 6 decimals.
pub fn write_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut writer = csv::Writer::from_path(root.join("annotations.csv"))?;
    writer.write_record(ANNOTATIONS_HEADER)?;
    for s in samples {
        s.validate()?;
        write_rgb_png(&s.image, &root.join("images").join(format!("{}.png", s.id)))?;
        if let Some(m) = &s.mask {
            write_mask_png(m, &root.join("masks").join(format!("{}.png", s.id)))?;
        }
        let coords = match &s.bbox {
            Some(b) => b.to_array().map(|v| format!("{v:.6}")),
            None => Default::default(),
        };
        let label = s.label.as_u8().to_string();
        let mut record = vec![s.id.as_str(), label.as_str()];
        record.extend(coords.iter().map(String::as_str));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
