use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    encode_raw, hu_to_raw, load_slice, read_annotations_csv, split_dataset, write_annotations_csv, CTSlice,
    LesionAnnotation, Splits,
};
use crate::error::{PdseError, Result};
use crate::geometry::BBox;
use crate::lesion::LesionType;

pub const MANIFEST_FILE: &str = "manifest.json";
const ANNOTATIONS_FILE: &str = "annotations.csv";
const IMAGE_DIR: &str = "images";
const FORMAT_NAME: &str = "pdse-dataset";
const FORMAT_VERSION: u32 = 1;

/// Appearance range of one lesion type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAppearance {
    pub hu_min: f64,
    pub hu_max: f64,
    pub semi_axis_min: f64,
    pub semi_axis_max: f64,
    /// Per-pixel Gaussian texture inside the lesion, HU.
    pub texture_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// 70 / 15 / 15 (needs at least 10 images).
    Standard,
    /// Everything in train, val and test empty.
    AllTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Soft-tissue level of the background, HU.
    pub background_hu: f64,
    /// Amplitude of the smooth background field, HU.
    pub background_amplitude: f64,
    /// Number of sinusoids summed into the smooth field.
    pub background_waves: usize,
    pub noise_std: f64,
    /// Minimum free pixels between lesion boxes and from the image border.
    pub min_gap: f64,
    /// Minimum HU gap required between neighbouring class ranges and between
    /// the background band and the faintest class.
    pub min_class_gap: f64,
    /// One entry per lesion type, in class-id order.
    pub classes: Vec<ClassAppearance>,
    pub splits: SplitMode,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let classes = (0..9)
            .map(|k| {
                let c = 300.0 + 330.0 * k as f64;
                ClassAppearance {
                    hu_min: c - 60.0,
                    hu_max: c + 60.0,
                    semi_axis_min: 6.0,
                    semi_axis_max: 16.0,
                    texture_std: 15.0,
                }
            })
            .collect();
        Self {
            count: 500,
            size: 128,
            seed: 0,
            lesions_min: 1,
            lesions_max: 3,
            background_hu: 40.0,
            background_amplitude: 40.0,
            background_waves: 4,
            noise_std: 15.0,
            min_gap: 2.0,
            min_class_gap: 100.0,
            classes,
            splits: SplitMode::Standard,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PdseError::Config(m));
        if self.size < 128 {
            return err(format!("phantom size must be at least 128, got {}", self.size));
        }
        if self.lesions_min == 0 || self.lesions_min > self.lesions_max {
            return err("need 1 ≤ lesions_min ≤ lesions_max".into());
        }
        if self.classes.len() != LesionType::ALL.len() {
            return err(format!("need {} class appearances, got {}", LesionType::ALL.len(), self.classes.len()));
        }
        if self.splits == SplitMode::Standard && self.count > 0 && self.count < 10 {
            return err("standard splits need at least 10 images; use splits = \"all_train\"".into());
        }
        let finite = [self.background_hu, self.background_amplitude, self.noise_std, self.min_gap];
        if finite.iter().any(|v| !v.is_finite() || *v < -1024.0) || self.noise_std < 0.0 || self.min_gap < 0.0 {
            return err("background parameters must be finite and non-negative where applicable".into());
        }
        let mut ranges: Vec<(f64, f64)> = Vec::new();
        for (k, c) in self.classes.iter().enumerate() {
            let ok = c.hu_min <= c.hu_max
                && c.semi_axis_min >= 1.0
                && c.semi_axis_min <= c.semi_axis_max
                && 2.0 * c.semi_axis_max + 2.0 * self.min_gap < self.size as f64
                && c.texture_std >= 0.0;
            if !ok {
                return err(format!("class {} appearance is inconsistent", k + 1));
            }
            ranges.push((c.hu_min, c.hu_max));
        }
        ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let bg_top = self.background_hu + self.background_amplitude;
        if ranges[0].0 - bg_top < self.min_class_gap {
            return err(format!(
                "faintest class starts {} HU above the background band, need {}",
                ranges[0].0 - bg_top,
                self.min_class_gap
            ));
        }
        for w in ranges.windows(2) {
            if w[1].0 - w[0].1 < self.min_class_gap {
                return err(format!(
                    "class intensity ranges [{}, {}] and [{}, {}] are closer than {} HU",
                    w[0].0, w[0].1, w[1].0, w[1].1, self.min_class_gap
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Tight axis-aligned bounds of the rotated ellipse.
    fn bbox(&self) -> BBox {
        let (s, c) = self.theta.sin_cos();
        let hw = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hh = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        BBox::new(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    app: &ClassAppearance,
    size: f64,
    gap: f64,
    placed: &[BBox],
) -> Option<Ellipse> {
    for _ in 0..200 {
        let a = rng.random_range(app.semi_axis_min..=app.semi_axis_max);
        let b = rng.random_range(app.semi_axis_min..=app.semi_axis_max);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let probe = Ellipse { cx: 0.0, cy: 0.0, a, b, theta }.bbox();
        let (hw, hh) = (probe.x2, probe.y2);
        let (lo_x, hi_x) = (gap + hw, size - gap - hw);
        let (lo_y, hi_y) = (gap + hh, size - gap - hh);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        let e = Ellipse {
            cx: rng.random_range(lo_x..hi_x),
            cy: rng.random_range(lo_y..hi_y),
            a,
            b,
            theta,
        };
        let bb = e.bbox();
        let grown = BBox::new(bb.x1 - gap, bb.y1 - gap, bb.x2 + gap, bb.y2 + gap);
        if placed.iter().all(|p| grown.intersection(p) == 0.0) {
            return Some(e);
        }
    }
    None
}

struct Rendered {
    pixels: Vec<u16>,
    lesions: Vec<(Ellipse, LesionType)>,
}

fn render_image(spec: &PhantomSpec, rng: &mut ChaCha8Rng, bag: &mut Vec<LesionType>) -> Result<Rendered> {
    let n = spec.size;
    let sz = n as f64;
    let waves: Vec<(f64, f64, f64)> = (0..spec.background_waves)
        .map(|_| {
            let wavelength = rng.random_range(0.5 * sz..2.0 * sz);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let norm = 1.0 / (spec.background_waves.max(1) as f64);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| PdseError::Config(e.to_string()))?;
    let mut hu = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let field: f64 = waves.iter().map(|(kx, ky, ph)| (kx * fx + ky * fy + ph).sin()).sum();
            hu[y * n + x] = spec.background_hu + spec.background_amplitude * norm * field;
        }
    }
    let count = rng.random_range(spec.lesions_min..=spec.lesions_max);
    let mut lesions: Vec<(Ellipse, LesionType)> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        if bag.is_empty() {
            bag.extend(LesionType::ALL);
            bag.shuffle(rng);
        }
        let t = *bag.last().expect("refilled");
        let app = &spec.classes[t.id() as usize - 1];
        let Some(e) = place_lesion(rng, app, sz, spec.min_gap, &boxes) else {
            continue;
        };
        bag.pop();
        let level = rng.random_range(app.hu_min..=app.hu_max);
        let tex = Normal::new(0.0, app.texture_std).map_err(|e| PdseError::Config(e.to_string()))?;
        let bb = e.bbox();
        let (y0, y1) = (bb.y1.floor().max(0.0) as usize, (bb.y2.ceil() as usize).min(n));
        let (x0, x1) = (bb.x1.floor().max(0.0) as usize, (bb.x2.ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    hu[y * n + x] = level + tex.sample(rng);
                }
            }
        }
        boxes.push(bb);
        lesions.push((e, t));
    }
    if lesions.len() < spec.lesions_min {
        return Err(PdseError::Config("could not place the minimum number of lesions".into()));
    }
    let pixels = hu.iter().map(|&v| hu_to_raw(v + noise.sample(rng))).collect();
    Ok(Rendered { pixels, lesions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// Image files relative to the dataset root.
    pub images: Vec<String>,
    pub annotations: String,
    pub splits: Splits,
    /// SHA-256 over the annotation file and every image file.
    pub content_hash: String,
    pub spec: Option<PhantomSpec>,
}

fn content_hash(root: &Path, files: &[String]) -> Result<String> {
    let mut sorted = files.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for f in &sorted {
        let bytes = fs::read(root.join(f))?;
        h.update(f.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `images/<id>.raw`, `annotations.csv` and `manifest.json` under
/// `out_dir`. The same spec always produces byte-identical files.
/// Reads a phantom job file (TOML, or JSON by extension): an `output_dir`
/// plus any [`PhantomSpec`] fields. A relative `output_dir` is resolved
/// against the file's directory.
pub fn read_phantom_job(path: &Path) -> Result<(PhantomSpec, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let mut v: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| PdseError::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    };
    let out = v
        .as_object_mut()
        .and_then(|m| m.remove("output_dir"))
        .and_then(|o| o.as_str().map(PathBuf::from))
        .ok_or_else(|| PdseError::Config("phantom job needs an `output_dir` string".into()))?;
    let out = if out.is_relative() {
        path.parent().unwrap_or(Path::new(".")).join(out)
    } else {
        out
    };
    let spec: PhantomSpec = serde_json::from_value(v).map_err(|e| PdseError::Config(e.to_string()))?;
    spec.validate()?;
    Ok((spec, out))
}

pub fn generate_phantoms(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join(IMAGE_DIR))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bag = Vec::new();
    let mut ids = Vec::with_capacity(spec.count);
    let mut files = Vec::with_capacity(spec.count);
    let mut rows = Vec::new();
    for i in 0..spec.count {
        let id = format!("phantom_{i:05}");
        let r = render_image(spec, &mut rng, &mut bag)?;
        let rel = format!("{IMAGE_DIR}/{id}.raw");
        fs::write(out_dir.join(&rel), encode_raw(spec.size, spec.size, &r.pixels)?)?;
        for (e, t) in &r.lesions {
            rows.push((
                id.clone(),
                LesionAnnotation {
                    bbox: e.bbox(),
                    lesion_type: *t,
                },
            ));
        }
        ids.push(id);
        files.push(rel);
    }
    write_annotations_csv(fs::File::create(out_dir.join(ANNOTATIONS_FILE))?, &rows)?;
    let splits = match spec.splits {
        SplitMode::Standard if !ids.is_empty() => split_dataset(&ids, spec.seed)?,
        _ => Splits {
            train: ids.clone(),
            ..Splits::default()
        },
    };
    let mut hashed = files.clone();
    hashed.push(ANNOTATIONS_FILE.to_string());
    let manifest = DatasetManifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        seed: spec.seed,
        count: spec.count,
        size: spec.size,
        images: files,
        annotations: ANNOTATIONS_FILE.into(),
        splits,
        content_hash: content_hash(out_dir, &hashed)?,
        spec: Some(spec.clone()),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// A dataset directory: manifest, annotation CSV and images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    files: HashMap<String, String>,
    annotations: HashMap<String, Vec<LesionAnnotation>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(PdseError::Format(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut files = HashMap::new();
        for f in &manifest.images {
            let id = Path::new(f)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| PdseError::Format(format!("bad image path {f}")))?;
            if files.insert(id.clone(), f.clone()).is_some() {
                return Err(PdseError::Format(format!("duplicate image id {id}")));
            }
        }
        let mut annotations: HashMap<String, Vec<LesionAnnotation>> = HashMap::new();
        for (id, a) in read_annotations_csv(fs::File::open(root.join(&manifest.annotations))?)? {
            if !files.contains_key(&id) {
                return Err(PdseError::Format(format!("annotation for unknown image {id}")));
            }
            annotations.entry(id).or_default().push(a);
        }
        for split in [&manifest.splits.train, &manifest.splits.val, &manifest.splits.test] {
            if let Some(id) = split.iter().find(|id| !files.contains_key(*id)) {
                return Err(PdseError::Format(format!("split lists unknown image {id}")));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            files,
            annotations,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.manifest.splits.get(name)
    }

    pub fn annotations(&self, id: &str) -> &[LesionAnnotation] {
        self.annotations.get(id).map_or(&[], |v| v.as_slice())
    }

    pub fn load(&self, id: &str) -> Result<CTSlice> {
        let f = self
            .files
            .get(id)
            .ok_or_else(|| PdseError::Format(format!("unknown image {id}")))?;
        let mut s = load_slice(&self.root.join(f))?;
        s.image_id = id.to_string();
        s.with_annotations(self.annotations(id).to_vec())
    }

    /// Recomputes the content hash and compares it with the manifest.
    pub fn verify(&self) -> Result<()> {
        let mut files = self.manifest.images.clone();
        files.push(self.manifest.annotations.clone());
        let h = content_hash(&self.root, &files)?;
        if h != self.manifest.content_hash {
            return Err(PdseError::Format(format!(
                "dataset content hash {h} does not match manifest {}",
                self.manifest.content_hash
            )));
        }
        Ok(())
    }
}
