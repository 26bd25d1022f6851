//! CT slice IO, HU preprocessing, five-area augmentation, splitting, and the
//! synthetic phantom dataset.

mod io;
mod phantom;

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::io::{
    decode_png16, decode_raw, encode_png16, encode_raw, load_slice, write_png16, write_png_rgb8, write_raw, RAW_MAGIC,
};
pub use phantom::{
    generate_phantoms, read_phantom_job, ClassAppearance, Dataset, DatasetManifest, PhantomSpec, SplitMode, MANIFEST_FILE,
};

use crate::error::{PdseError, Result};
use crate::geometry::BBox;
pub use crate::lesion::LesionType;
use crate::tensor::{Real, Tensor};

pub const HU_OFFSET: i32 = 32768;
pub const HU_MIN: i32 = -1024;
pub const HU_MAX: i32 = 3071;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub bbox: BBox,
    pub lesion_type: LesionType,
}

impl LesionAnnotation {
    pub fn class_id(&self) -> u8 {
        self.lesion_type.id()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CTSlice {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major stored values (HU + 32768).
    pub pixels: Vec<u16>,
    /// Millimetres per pixel, when known.
    pub spacing: Option<f64>,
    pub annotations: Vec<LesionAnnotation>,
}

impl CTSlice {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, pixels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(PdseError::shape("CTSlice", &[pixels.len()], &[height, width]));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            pixels,
            spacing: None,
            annotations: Vec::new(),
        })
    }

    /// Attaches annotations after checking they lie inside the image.
    pub fn with_annotations(mut self, anns: Vec<LesionAnnotation>) -> Result<Self> {
        for a in &anns {
            let b = a.bbox;
            if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.width as f64 && b.y2 <= self.height as f64)
                || !(b.x2 > b.x1 && b.y2 > b.y1)
            {
                return Err(PdseError::Format(format!(
                    "annotation {b:?} on {} is outside the {}x{} image or empty",
                    self.image_id, self.height, self.width
                )));
            }
        }
        self.annotations = anns;
        Ok(self)
    }
}

/// `(clamp(raw − 32768, −1024, 3071) + 1024) / 4095`.
pub fn hu_normalize_value(raw: u16) -> f64 {
    let hu = (raw as i32 - HU_OFFSET).clamp(HU_MIN, HU_MAX);
    (hu - HU_MIN) as f64 / (HU_MAX - HU_MIN) as f64
}

/// `1 × H × W` tensor of normalized intensities in [0, 1].
pub fn hu_normalize<T: Real>(slice: &CTSlice) -> Tensor<T> {
    let data = slice.pixels.iter().map(|&p| T::c(hu_normalize_value(p))).collect();
    Tensor::new(&[1, slice.height, slice.width], data).expect("slice extents are validated")
}

/// Stored value for a Hounsfield unit, rounded and saturated to u16.
pub fn hu_to_raw(hu: f64) -> u16 {
    (hu + HU_OFFSET as f64).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Bilinear resample of the window `[y0, y0+wh) × [x0, x0+ww)` of an `H × W`
/// plane onto an `out_h × out_w` grid (pixel centres aligned, edges clamped).
pub fn resample_window(
    src: &[f32],
    h: usize,
    w: usize,
    window: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let (y0, x0, wh, ww) = window;
    let (sy, sx) = (wh / out_h as f64, ww / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (ya, fy) = (y.floor() as usize, y - y.floor());
        let yb = (ya + 1).min(h - 1);
        for ox in 0..out_w {
            let x = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (xa, fx) = (x.floor() as usize, x - x.floor());
            let xb = (xa + 1).min(w - 1);
            let v = (1.0 - fy) * ((1.0 - fx) * src[ya * w + xa] as f64 + fx * src[ya * w + xb] as f64)
                + fy * ((1.0 - fx) * src[yb * w + xa] as f64 + fx * src[yb * w + xb] as f64);
            out.push(v as f32);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the image side.
    pub crop_frac: f64,
    /// Minimum fraction of a box's area that must survive clipping.
    pub min_visible: f64,
    /// Random shift of each window, as a fraction of the free margin.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_frac: 0.6,
            min_visible: 0.25,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// Which window: 0..4 are the corners (TL, TR, BL, BR), 4 is the centre.
    pub area: usize,
    /// `(y0, x0, height, width)` in source pixels.
    pub window: (f64, f64, f64, f64),
    /// `1 × out × out`.
    pub image: Tensor<f32>,
    pub annotations: Vec<LesionAnnotation>,
}

/// Annotations of one window mapped to an `out_h × out_w` crop, keeping only
/// boxes whose centre lies in the window and whose clipped area is at least
/// `min_visible` of the original.
pub fn crop_annotations(
    anns: &[LesionAnnotation],
    window: (f64, f64, f64, f64),
    min_visible: f64,
    out_h: usize,
    out_w: usize,
) -> Vec<LesionAnnotation> {
    let (y0, x0, wh, ww) = window;
    let win = BBox::new(x0, y0, x0 + ww, y0 + wh);
    let (sx, sy) = (out_w as f64 / ww, out_h as f64 / wh);
    anns.iter()
        .filter_map(|a| {
            let (cx, cy) = a.bbox.center();
            if !win.contains_point(cx, cy) {
                return None;
            }
            let local = a.bbox.translate(-x0, -y0).clip(ww, wh);
            if !(local.area() > 0.0) || local.area() < min_visible * a.bbox.area() {
                return None;
            }
            let b = local.scale(sx, sy).clip(out_w as f64, out_h as f64);
            (b.width() > 0.0 && b.height() > 0.0).then_some(LesionAnnotation {
                bbox: b,
                lesion_type: a.lesion_type,
            })
        })
        .collect()
}

/// Four corner windows and one centre window, each `crop_frac` of the image
/// side, resampled to `out × out`. Windows left without an annotation are
/// dropped.
pub fn five_area_augment<R: Rng>(
    image: &Tensor<f32>,
    anns: &[LesionAnnotation],
    cfg: &AugmentConfig,
    out: usize,
    rng: &mut R,
) -> Vec<Crop> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (wh, ww) = (cfg.crop_frac * h as f64, cfg.crop_frac * w as f64);
    let (my, mx) = (h as f64 - wh, w as f64 - ww);
    let origins = [(0.0, 0.0), (0.0, mx), (my, 0.0), (my, mx), (0.5 * my, 0.5 * mx)];
    let mut crops = Vec::new();
    for (area, &(oy, ox)) in origins.iter().enumerate() {
        let (mut y0, mut x0) = (oy, ox);
        if cfg.jitter > 0.0 {
            y0 = (y0 + rng.random_range(-1.0..1.0) * cfg.jitter * my).clamp(0.0, my);
            x0 = (x0 + rng.random_range(-1.0..1.0) * cfg.jitter * mx).clamp(0.0, mx);
        }
        let window = (y0, x0, wh, ww);
        let kept = crop_annotations(anns, window, cfg.min_visible, out, out);
        if kept.is_empty() {
            continue;
        }
        let data = resample_window(&image.data()[..h * w], h, w, window, out, out);
        crops.push(Crop {
            area,
            window,
            image: Tensor::new(&[1, out, out], data).expect("positive output size"),
            annotations: kept,
        });
    }
    crops
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(PdseError::Config(format!("unknown split {name:?} (train, val, test)"))),
        }
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(PdseError::invalid("split_dataset", format!("duplicate id {id}")));
        }
    }
    Ok(())
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = (0.70 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, val)
}

/// Seeded shuffle of the sorted ids, cut into `round(0.7n)`, `round(0.15n)`
/// and the remainder.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<Splits> {
    if ids.len() < 10 {
        return Err(PdseError::invalid("split_dataset", format!("need at least 10 ids, got {}", ids.len())));
    }
    check_unique(ids)?;
    let mut v = ids.to_vec();
    v.sort();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (nt, nv) = split_sizes(v.len());
    let test = v.split_off(nt + nv);
    let val = v.split_off(nt);
    Ok(Splits { train: v, val, test })
}

/// Like [`split_dataset`] but keeps every group (e.g. a patient) within one
/// split; groups are shuffled and filled into train, then val, then test.
pub fn split_grouped(ids: &[String], group_of: impl Fn(&str) -> String, seed: u64) -> Result<Splits> {
    check_unique(ids)?;
    let mut groups: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for id in ids {
        groups.entry(group_of(id)).or_default().push(id.clone());
    }
    let mut keys: Vec<String> = groups.keys().cloned().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (nt, nv) = split_sizes(ids.len());
    let mut s = Splits::default();
    for k in keys {
        let members = groups.remove(&k).unwrap_or_default();
        let dst = if s.train.len() < nt {
            &mut s.train
        } else if s.val.len() < nv {
            &mut s.val
        } else {
            &mut s.test
        };
        dst.extend(members);
    }
    Ok(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class_id: u8,
}

/// `image_id,x1,y1,x2,y2,class_id` with a header row.
pub fn write_annotations_csv<W: Write>(w: W, rows: &[(String, LesionAnnotation)]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["image_id", "x1", "y1", "x2", "y2", "class_id"])?;
    for (id, a) in rows {
        wr.serialize(AnnotationRow {
            image_id: id.clone(),
            x1: a.bbox.x1,
            y1: a.bbox.y1,
            x2: a.bbox.x2,
            y2: a.bbox.y2,
            class_id: a.class_id(),
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_annotations_csv<R: Read>(r: R) -> Result<Vec<(String, LesionAnnotation)>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "x1", "y1", "x2", "y2", "class_id"] {
        return Err(PdseError::Format(format!("unexpected annotation header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: AnnotationRow = row?;
        out.push((
            row.image_id,
            LesionAnnotation {
                bbox: BBox::new(row.x1, row.y1, row.x2, row.y2),
                lesion_type: LesionType::from_id(row.class_id)?,
            },
        ));
    }
    Ok(out)
}
