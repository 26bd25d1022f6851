use pdse::data::{
    encode_png16, encode_raw, five_area_augment, generate_phantoms, hu_normalize, hu_normalize_value, hu_to_raw,
    load_slice, split_dataset, split_grouped, write_png16, write_raw, AugmentConfig, CTSlice, Dataset,
    LesionAnnotation, LesionType, PhantomSpec,
};
use pdse::geometry::BBox;
use pdse::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fs;

#[test]
fn raw_load_keeps_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.raw");
    fs::write(&p, encode_raw(2, 2, &[32768, 33792, 31744, 0]).unwrap()).unwrap();
    let s = load_slice(&p).unwrap();
    assert_eq!((s.height, s.width), (2, 2));
    assert_eq!(s.pixels, vec![32768, 33792, 31744, 0]);
    assert_eq!(s.image_id, "s");

    let mut bytes = fs::read(&p).unwrap();
    bytes.pop();
    fs::write(&p, bytes).unwrap();
    assert!(load_slice(&p).is_err());
}

#[test]
fn eight_bit_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g8.png");
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, 4, 4);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[7u8; 16]).unwrap();
    }
    fs::write(&p, buf).unwrap();
    let e = load_slice(&p).unwrap_err().to_string();
    assert!(e.contains("depth"), "{e}");
}

#[test]
fn write_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w) in [(128, 128), (131, 140)] {
        let pixels: Vec<u16> = (0..h * w).map(|_| rng.random()).collect();
        let s = CTSlice::new("x", h, w, pixels).unwrap();
        let (pr, pp) = (dir.path().join("x.raw"), dir.path().join("x.png"));
        write_raw(&pr, &s).unwrap();
        write_png16(&pp, &s).unwrap();
        assert_eq!(load_slice(&pr).unwrap().pixels, s.pixels);
        assert_eq!(load_slice(&pp).unwrap().pixels, s.pixels);
        assert_eq!(fs::read(&pp).unwrap(), encode_png16(h, w, &s.pixels).unwrap());
    }
}

#[test]
fn hu_window_spot_values() {
    assert!((hu_normalize_value(32768) - 1024.0 / 4095.0).abs() < 1e-15);
    assert!((hu_normalize_value(32768) - 0.250061).abs() < 1e-6);
    assert_eq!(hu_normalize_value(0), 0.0);
    assert_eq!(hu_normalize_value(65535), 1.0);
    assert_eq!(hu_to_raw(0.0), 32768);
    let s = CTSlice::new("t", 1, 3, vec![0, 32768, 65535]).unwrap();
    let t: Tensor<f64> = hu_normalize(&s);
    assert_eq!(t.shape(), &[1, 1, 3]);
    assert_eq!(t.data()[0], 0.0);
    assert_eq!(t.data()[2], 1.0);
}

fn ann(x1: f64, y1: f64, x2: f64, y2: f64) -> LesionAnnotation {
    LesionAnnotation {
        bbox: BBox::new(x1, y1, x2, y2),
        lesion_type: LesionType::Liver,
    }
}

#[test]
fn crops_without_the_lesion_centre_are_dropped() {
    let img = Tensor::<f32>::zeros(&[1, 128, 128]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = AugmentConfig::default();
    // Corner windows span [0, 76.8] or [51.2, 128]; the centre one [25.6, 102.4].
    let crops = five_area_augment(&img, &[ann(60.0, 60.0, 68.0, 68.0)], &cfg, 128, &mut rng);
    assert_eq!(crops.len(), 5);
    let c = crops.iter().find(|c| c.area == 4).unwrap();
    let b = c.annotations[0].bbox;
    let s = 128.0 / 76.8;
    assert!((b.x1 - (60.0 - 25.6) * s).abs() < 1e-9 && (b.x2 - (68.0 - 25.6) * s).abs() < 1e-9);
    assert_eq!(c.image.shape(), &[1, 128, 128]);

    let crops = five_area_augment(&img, &[ann(36.0, 60.0, 44.0, 68.0)], &cfg, 128, &mut rng);
    let areas: Vec<usize> = crops.iter().map(|c| c.area).collect();
    assert_eq!(areas, vec![0, 2, 4]);
    let crops = five_area_augment(&img, &[ann(10.0, 10.0, 20.0, 20.0)], &cfg, 128, &mut rng);
    let areas: Vec<usize> = crops.iter().map(|c| c.area).collect();
    assert_eq!(areas, vec![0]);
}

#[test]
fn whole_image_lesion_keeps_every_crop() {
    let img = Tensor::<f32>::zeros(&[1, 128, 128]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let crops = five_area_augment(&img, &[ann(0.0, 0.0, 128.0, 128.0)], &AugmentConfig::default(), 128, &mut rng);
    assert_eq!(crops.len(), 5);
    assert!(five_area_augment(&img, &[], &AugmentConfig::default(), 128, &mut rng).is_empty());
}

#[test]
fn crop_resampling_of_constant_image_is_constant() {
    let img = Tensor::<f32>::full(&[1, 128, 128], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let crops = five_area_augment(&img, &[ann(0.0, 0.0, 128.0, 128.0)], &AugmentConfig::default(), 96, &mut rng);
    for c in crops {
        assert!(c.image.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}

#[test]
fn phantoms_are_deterministic() {
    let spec = PhantomSpec {
        count: 12,
        seed: 17,
        ..PhantomSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_phantoms(&spec, a.path()).unwrap();
    let mb = generate_phantoms(&spec, b.path()).unwrap();
    assert_eq!(ma.content_hash, mb.content_hash);
    for f in ma.images.iter().chain([&ma.annotations]) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.path().join("manifest.json")).unwrap(), fs::read(b.path().join("manifest.json")).unwrap());
    let ds = Dataset::open(a.path()).unwrap();
    ds.verify().unwrap();
    let other = generate_phantoms(&PhantomSpec { seed: 18, ..spec }, b.path()).unwrap();
    assert_ne!(other.content_hash, ma.content_hash);
}

#[test]
fn empty_phantom_dataset_has_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_phantoms(&PhantomSpec { count: 0, ..PhantomSpec::default() }, dir.path()).unwrap();
    assert_eq!(m.count, 0);
    let ds = Dataset::open(dir.path()).unwrap();
    ds.verify().unwrap();
    assert!(ds.split("train").unwrap().is_empty());
}

/// With a flat background and no noise every lesion pixel differs from the
/// background value, so each such pixel must sit inside an annotated box.
#[test]
fn annotation_boxes_contain_their_lesions_and_classes_balance() {
    let spec = PhantomSpec {
        count: 500,
        seed: 3,
        background_amplitude: 0.0,
        noise_std: 0.0,
        ..PhantomSpec::default()
    };
    let bg = hu_to_raw(spec.background_hu);
    let dir = tempfile::tempdir().unwrap();
    generate_phantoms(&spec, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let mut counts = [0usize; 9];
    for f in &ds.manifest.images {
        let id = std::path::Path::new(f).file_stem().unwrap().to_string_lossy().into_owned();
        let s = ds.load(&id).unwrap();
        assert!((1..=3).contains(&s.annotations.len()));
        for a in &s.annotations {
            counts[a.class_id() as usize - 1] += 1;
            let b = a.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
        }
        let mut touched = vec![[false; 4]; s.annotations.len()];
        for y in 0..s.height {
            for x in 0..s.width {
                if s.pixels[y * s.width + x] == bg {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let hit = s.annotations.iter().position(|a| a.bbox.contains_point(px, py));
                let k = hit.unwrap_or_else(|| panic!("{id}: lesion pixel ({x}, {y}) outside every box"));
                let b = s.annotations[k].bbox;
                for (side, d) in [px - b.x1, b.x2 - px, py - b.y1, b.y2 - py].iter().enumerate() {
                    touched[k][side] |= *d < 1.5;
                }
            }
        }
        // Tightness: lesion pixels reach every side of their box.
        assert!(touched.iter().all(|t| t.iter().all(|&v| v)), "{id}: loose box");
    }
    let total: usize = counts.iter().sum();
    let uniform = total as f64 / 9.0;
    for (k, &c) in counts.iter().enumerate() {
        assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "class {} has {c} of {total}", k + 1);
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("id{i:04}")).collect()
}

#[test]
fn split_sizes() {
    let s = split_dataset(&ids(100), 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    let s = split_dataset(&ids(10), 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
    assert!(split_dataset(&ids(9), 0).is_err());
    let mut dup = ids(20);
    dup[3] = dup[4].clone();
    assert!(split_dataset(&dup, 0).is_err());
    // Input order does not matter.
    let mut rev = ids(50);
    rev.reverse();
    assert_eq!(split_dataset(&rev, 4).unwrap(), split_dataset(&ids(50), 4).unwrap());
}

#[test]
fn grouped_split_keeps_groups_together() {
    let v = ids(200);
    let group = |id: &str| id[..5].to_string();
    let s = split_grouped(&v, group, 1).unwrap();
    let mut owner = std::collections::HashMap::new();
    for (k, part) in [&s.train, &s.val, &s.test].iter().enumerate() {
        for id in part.iter() {
            assert_eq!(*owner.entry(group(id)).or_insert(k), k);
        }
    }
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hu_normalize_is_monotone(a in any::<u16>(), b in any::<u16>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (hu_normalize_value(lo), hu_normalize_value(hi));
        prop_assert!(x <= y && (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
    }

    #[test]
    fn emitted_boxes_are_sound(seed in any::<u64>(), jitter in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(128..200usize);
        let img = Tensor::<f32>::zeros(&[1, size, size]);
        let anns: Vec<LesionAnnotation> = (0..rng.random_range(1..5))
            .map(|_| {
                let (w, h) = (rng.random_range(2.0..60.0), rng.random_range(2.0..60.0));
                let (x, y) = (rng.random_range(0.0..size as f64 - w), rng.random_range(0.0..size as f64 - h));
                ann(x, y, x + w, y + h)
            })
            .collect();
        let cfg = AugmentConfig { jitter, ..AugmentConfig::default() };
        let out = 128;
        for c in five_area_augment(&img, &anns, &cfg, out, &mut rng) {
            let (y0, x0, wh, ww) = c.window;
            let win = BBox::new(x0, y0, x0 + ww, y0 + wh);
            let inside = |o: &LesionAnnotation| {
                let (cx, cy) = o.bbox.center();
                win.contains_point(cx, cy)
            };
            prop_assert!(anns.iter().any(inside));
            prop_assert!(!c.annotations.is_empty());
            for a in &c.annotations {
                let b = a.bbox;
                prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= out as f64 && b.y2 <= out as f64);
                prop_assert!(b.width() > 0.0 && b.height() > 0.0);
                // Map back to source pixels; the source box centre must lie in the window.
                let src = b.scale(ww / out as f64, wh / out as f64).translate(x0, y0);
                let source = anns.iter().any(|o| inside(o) && o.bbox.intersection(&src) >= 0.25 * o.bbox.area() - 1e-6);
                prop_assert!(source);
            }
        }
    }
}

#[test]
fn split_set_algebra_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.random_range(10..200);
        let mut set = HashSet::new();
        while set.len() < n {
            set.insert(format!("s{}", rng.random_range(0..100_000u32)));
        }
        let v: Vec<String> = set.iter().cloned().collect();
        let seed = rng.random();
        let s = split_dataset(&v, seed).unwrap();
        let all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), n);
        assert_eq!(all.iter().map(|s| s.as_str()).collect::<HashSet<_>>(), set.iter().map(|s| s.as_str()).collect());
        assert_eq!(s.train.len(), (0.7 * n as f64).round() as usize);
        assert_eq!(s, split_dataset(&v, seed).unwrap());
    }
}
