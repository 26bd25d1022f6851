use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{hu_normalize_value, load_slice, write_png_rgb8, CTSlice};
use crate::error::Result;
use crate::eval::DetectionBox;
use crate::geometry::BBox;

use super::{detect_batch, prepare_slice, Checkpoint};
use crate::anchors::generate_anchors;

#[derive(Clone, Debug)]
pub struct DetectOptions {
    /// Overrides the checkpoint's score threshold.
    pub score_thresh: Option<f64>,
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct DetectResult {
    /// Boxes in original image pixels, keyed by image id.
    pub detections: Vec<(String, Vec<DetectionBox>)>,
    pub overlays: Vec<PathBuf>,
}

/// Fixed per-class outline colours, indexed by class id.
const PALETTE: [[u8; 3]; 10] = [
    [255, 255, 255],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

pub fn class_color(class_id: u8) -> [u8; 3] {
    PALETTE[class_id as usize % PALETTE.len()]
}

/// Grey rendering of the slice with a 2-px class-coloured outline per box.
pub fn render_overlay(slice: &CTSlice, dets: &[DetectionBox]) -> Vec<u8> {
    let (h, w) = (slice.height, slice.width);
    let mut rgb: Vec<u8> = slice
        .pixels
        .iter()
        .flat_map(|&p| {
            let v = (hu_normalize_value(p) * 255.0).round() as u8;
            [v, v, v]
        })
        .collect();
    for d in dets {
        let b = d.bbox.clip(w as f64, h as f64);
        if b.area() <= 0.0 {
            continue;
        }
        let c = class_color(d.class_id);
        let x1 = b.x1.floor() as usize;
        let y1 = b.y1.floor() as usize;
        let x2 = (b.x2.ceil() as usize).min(w).saturating_sub(1);
        let y2 = (b.y2.ceil() as usize).min(h).saturating_sub(1);
        let mut put = |x: usize, y: usize| {
            let i = 3 * (y * w + x);
            rgb[i..i + 3].copy_from_slice(&c);
        };
        for t in 0..2 {
            for x in x1..=x2 {
                put(x, (y1 + t).min(y2));
                put(x, y2.saturating_sub(t).max(y1));
            }
            for y in y1..=y2 {
                put((x1 + t).min(x2), y);
                put(x2.saturating_sub(t).max(x1), y);
            }
        }
    }
    rgb
}

fn to_original(d: DetectionBox, input: usize, (w, h): (usize, usize)) -> DetectionBox {
    let (sx, sy) = (w as f64 / input as f64, h as f64 / input as f64);
    DetectionBox {
        bbox: BBox::new(d.bbox.x1 * sx, d.bbox.y1 * sy, d.bbox.x2 * sx, d.bbox.y2 * sy),
        ..d
    }
}

/// Runs a checkpoint on image files; optionally writes `<id>.png` overlays.
pub fn detect_images(checkpoint: &Path, images: &[PathBuf], opts: &DetectOptions) -> Result<DetectResult> {
    let (model, store, manifest) = Checkpoint::<f32>::load(checkpoint)?.into_model()?;
    let mut pp = manifest.postprocess;
    if let Some(t) = opts.score_thresh {
        pp.score_thresh = t;
    }
    let s = manifest.input_size;
    let anchors = generate_anchors(&model.config.anchors, s, s)?;
    if let Some(dir) = &opts.overlay_dir {
        fs::create_dir_all(dir)?;
    }
    let mut out = DetectResult {
        detections: Vec::new(),
        overlays: Vec::new(),
    };
    for path in images {
        let slice = load_slice(path)?;
        let p = prepare_slice(&slice, s);
        let dets: Vec<DetectionBox> = detect_batch(&model, &store, &anchors, &[&p.image], &pp)?
            .remove(0)
            .into_iter()
            .map(|d| to_original(d, s, p.original))
            .collect();
        if let Some(dir) = &opts.overlay_dir {
            let file = dir.join(format!("{}.png", slice.image_id));
            write_png_rgb8(&file, slice.height, slice.width, &render_overlay(&slice, &dets))?;
            out.overlays.push(file);
        }
        out.detections.push((slice.image_id.clone(), dets));
    }
    Ok(out)
}
