use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn write_ppm(path: &Path, w: usize, h: usize, fill: impl Fn(usize, usize) -> [u8; 3]) {
    let mut px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            px.extend(fill(x, y));
        }
    }
    fs::write(path, RawImage::new(w, h, px).unwrap().to_ppm()).unwrap();
}

fn make_tree(root: &Path, classes: &[(&str, usize)]) {
    for (name, n) in classes {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            write_ppm(&dir.join(format!("{i:03}.ppm")), 4, 4, |x, y| [(x * 40) as u8, (y * 40) as u8, i as u8]);
        }
    }
}

#[test]
fn ppm_decodes_exact_pixels() {
    let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c".to_vec();
    let img = decode_image(&bytes).unwrap();
    assert_eq!((img.width, img.height), (2, 2));
    assert_eq!(img.pixel(0, 0), [1, 2, 3]);
    assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    assert_eq!(img.pixel(0, 1), [7, 8, 9]);
    assert_eq!(img.pixel(1, 1), [10, 11, 12]);
}

#[test]
fn grayscale_png_replicates_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let gray = ::image::GrayImage::from_fn(3, 2, |x, y| ::image::Luma([(x * 50 + y * 7) as u8]));
    gray.save(&path).unwrap();
    let img = load_image(&path).unwrap();
    for y in 0..2 {
        for x in 0..3 {
            let [r, g, b] = img.pixel(x, y);
            assert_eq!(r, (x * 50 + y * 7) as u8);
            assert!(r == g && g == b);
        }
    }
}

#[test]
fn rgba_png_drops_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    ::image::RgbaImage::from_pixel(2, 2, ::image::Rgba([9, 8, 7, 3])).save(&path).unwrap();
    assert_eq!(load_image(&path).unwrap().pixel(1, 1), [9, 8, 7]);
}

#[test]
fn truncated_png_is_decode_error_naming_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.png");
    ::image::RgbImage::from_pixel(16, 16, ::image::Rgb([1, 2, 3])).save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match load_image(&path) {
        Err(Error::Decode { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected decode error, got {other:?}"),
    }
}

#[test]
fn uniform_gray_preprocesses_to_constant() {
    let img = RawImage::new(37, 23, vec![128; 37 * 23 * 3]).unwrap();
    let t = preprocess(&img, 224).unwrap();
    assert_eq!(t.shape(), &[224, 224, 3]);
    assert!(t.data().iter().all(|&v| v == 128.0 / 255.0));
}

#[test]
fn same_size_preprocess_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let px: Vec<u8> = (0..16 * 16 * 3).map(|_| r.random()).collect();
    let img = RawImage::new(16, 16, px.clone()).unwrap();
    let t = preprocess(&img, 16).unwrap();
    for (v, p) in t.data().iter().zip(&px) {
        assert_eq!(*v, *p as f32 / 255.0);
    }
}

/// Half-pixel-centre bilinear resize evaluated directly from its definition.
fn bilinear_reference(img: &RawImage, out: usize, ox: usize, oy: usize, ch: usize) -> f64 {
    let scale_x = img.width as f64 / out as f64;
    let scale_y = img.height as f64 / out as f64;
    let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (img.width - 1) as f64);
    let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
    let p = |x, y| img.pixel(x, y)[ch] as f64;
    let v = (1.0 - ay) * ((1.0 - ax) * p(x0, y0) + ax * p(x1, y0))
        + ay * ((1.0 - ax) * p(x0, y1) + ax * p(x1, y1));
    v / 255.0
}

#[test]
fn checkerboard_downscale_matches_reference() {
    let n = 448;
    let px: Vec<u8> = (0..n * n)
        .flat_map(|i| {
            let (x, y) = (i % n, i / n);
            let on = ((x / 3) + (y / 5)) % 2 == 0;
            if on { [250, 10, 128] } else { [5, 240, 64] }
        })
        .collect();
    let img = RawImage::new(n, n, px).unwrap();
    let t = preprocess(&img, 224).unwrap();
    for (ox, oy) in [(0, 0), (1, 0), (37, 101), (150, 2), (223, 223)] {
        for ch in 0..3 {
            let got = t.data()[(oy * 224 + ox) * 3 + ch] as f64;
            let want = bilinear_reference(&img, 224, ox, oy, ch);
            assert!((got - want).abs() < 1e-6, "({ox},{oy},{ch}): {got} vs {want}");
        }
    }
}

fn random_image(seed: u64, side: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[side, side, 3], |_| r.random::<f32>()).unwrap()
}

#[test]
fn disabled_augment_is_bitwise_identity() {
    let t = random_image(3, 20);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&t, &AugmentConfig::disabled(), &mut r), t);
}

#[test]
fn double_flip_is_identity() {
    let t = random_image(4, 9);
    let p = AugmentParams {
        flip: true,
        ..AugmentParams::IDENTITY
    };
    assert_eq!(apply_augment(&apply_augment(&t, &p), &p), t);
    assert_ne!(apply_augment(&t, &p), t);
}

#[test]
fn degenerate_rotation_and_crop_are_identity() {
    let t = random_image(5, 24);
    let out = apply_augment(&t, &AugmentParams::IDENTITY);
    assert!(out.max_abs_diff(&t).unwrap() <= 1e-6);
}

#[test]
fn rotation_by_ninety_degrees_permutes_pixels() {
    let t = random_image(6, 5);
    let r = rotate(&t, 90.0);
    // Inverse mapping: output (x, y) reads source (cx + dy, cy - dx).
    for y in 0..5 {
        for x in 0..5 {
            let (sx, sy) = (y, 4 - x);
            for ch in 0..3 {
                let got = r.data()[(y * 5 + x) * 3 + ch];
                let want = t.data()[(sy * 5 + sx) * 3 + ch];
                assert!((got - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn scan_counts_classes_and_ignores_strays() {
    let dir = tempfile::tempdir().unwrap();
    make_tree(dir.path(), &[("b_class", 2), ("a_class", 3)]);
    fs::write(dir.path().join("stray.txt"), b"x").unwrap();
    fs::write(dir.path().join("a_class").join("notes.txt"), b"x").unwrap();
    let m = scan_directory(dir.path()).unwrap();
    assert_eq!(m.class_names, vec!["a_class", "b_class"]);
    assert_eq!(m.entries.len(), 5);
    assert_eq!(m.class_counts()["a_class"], 3);
    let paths: Vec<_> = m.entries.iter().map(|e| e.path.clone()).collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);
}

#[test]
fn single_class_scan() {
    let dir = tempfile::tempdir().unwrap();
    make_tree(dir.path(), &[("only", 3)]);
    let m = scan_directory(dir.path()).unwrap();
    assert_eq!((m.entries.len(), m.num_classes()), (3, 1));
}

#[test]
fn empty_class_folder_is_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    make_tree(dir.path(), &[("full", 2)]);
    fs::create_dir(dir.path().join("hollow")).unwrap();
    match scan_directory(dir.path()) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("hollow")),
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(scan_directory(empty.path()), Err(Error::Ingestion { .. })));
}

fn synthetic_manifest(counts: &[usize]) -> DatasetManifest {
    let mut entries = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            entries.push(Entry {
                path: format!("c{class}/{i:04}.ppm").into(),
                class,
                split: None,
            });
        }
    }
    DatasetManifest {
        root: "/nowhere".into(),
        class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(),
        entries,
        seed: None,
    }
}

#[test]
fn split_sizes_follow_floor_rule() {
    let r = SplitRatios::default();
    assert_eq!(split_sizes(100, &r), (70, 15, 15));
    assert_eq!(split_sizes(137, &r), (97, 20, 20));
    assert_eq!(split_sizes(2, &r), (2, 0, 0));
}

#[test]
fn split_is_stratified_and_deterministic() {
    let m = synthetic_manifest(&[100, 137]);
    let a = m.split(SplitRatios::default(), 9).unwrap();
    let b = m.split(SplitRatios::default(), 9).unwrap();
    assert_eq!(a, b);
    let c = m.split(SplitRatios::default(), 10).unwrap();
    assert_ne!(a, c);
    let count = |m: &DatasetManifest, class: usize, s: Split| {
        m.entries.iter().filter(|e| e.class == class && e.split == Some(s)).count()
    };
    assert_eq!((count(&a, 0, Split::Train), count(&a, 0, Split::Val), count(&a, 0, Split::Test)), (70, 15, 15));
    assert_eq!((count(&a, 1, Split::Train), count(&a, 1, Split::Val), count(&a, 1, Split::Test)), (97, 20, 20));
    assert!(a.entries.iter().all(|e| e.split.is_some()));
}

#[test]
fn bad_ratios_are_rejected() {
    assert!(SplitRatios::new(0.5, 0.5, 0.0).is_err());
    assert!(SplitRatios::new(0.7, 0.2, 0.2).is_err());
    assert!(SplitRatios::new(0.8, 0.1, 0.1).is_ok());
}

#[test]
fn manifest_jsonl_round_trip() {
    let m = synthetic_manifest(&[4, 5]).split(SplitRatios::default(), 3).unwrap();
    let mut buf = Vec::new();
    m.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
    assert!(text.lines().nth(1).unwrap().contains("\"split\""));
    assert_eq!(DatasetManifest::read_jsonl(&buf[..]).unwrap(), m);
}

fn memory_dataset(n: usize, side: usize) -> Dataset {
    let images = (0..n).map(|i| random_image(i as u64, side)).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    let splits = (0..n).map(|i| if i % 5 == 4 { Split::Val } else { Split::Train }).collect();
    Dataset::from_tensors(images, labels, splits, vec!["a".into(), "b".into()]).unwrap()
}

#[test]
fn batches_have_expected_sizes() {
    let images = (0..10).map(|i| random_image(i, 4)).collect();
    let ds = Dataset::from_tensors(images, vec![0; 10], vec![Split::Train; 10], vec!["a".into()]).unwrap();
    let sizes: Vec<usize> = ds
        .batches(Split::Train, 4, Some(1), 0, &AugmentConfig::default())
        .unwrap()
        .map(|b| b.unwrap().labels.len())
        .collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert_eq!(ds.batches(Split::Test, 4, None, 0, &AugmentConfig::default()).unwrap().count(), 0);
}

#[test]
fn shuffle_depends_on_seed_and_epoch() {
    let ds = memory_dataset(40, 4);
    let order = |epoch| ds.order(Split::Train, Some(7), epoch);
    assert_eq!(order(0), order(0));
    assert_ne!(order(0), order(1));
    let mut all = order(3);
    all.sort();
    assert_eq!(all, ds.manifest().indices(Split::Train));
}

#[test]
fn batch_stream_is_reproducible() {
    let ds = memory_dataset(20, 6);
    let run = || -> Vec<Batch> {
        ds.batches(Split::Train, 3, Some(5), 2, &AugmentConfig::default())
            .unwrap()
            .map(|b| b.unwrap())
            .collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn val_split_is_never_augmented() {
    let ds = memory_dataset(20, 6);
    for b in ds.batches(Split::Val, 2, Some(5), 0, &AugmentConfig::default()).unwrap() {
        let b = b.unwrap();
        for (k, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.images.sample(k).unwrap(), ds.image(i).unwrap());
        }
    }
}

#[test]
fn every_train_entry_seen_once_per_epoch() {
    let ds = memory_dataset(23, 4);
    let mut seen: Vec<usize> = ds
        .batches(Split::Train, 4, Some(2), 0, &AugmentConfig::default())
        .unwrap()
        .flat_map(|b| b.unwrap().indices)
        .collect();
    seen.sort();
    assert_eq!(seen, ds.manifest().indices(Split::Train));
}

#[test]
fn synthetic_generator_round_trips_through_scan() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = &synth::Shape::ALL[..3];
    synth::generate_dataset(dir.path(), shapes, 4, 16, 1).unwrap();
    let m = scan_directory(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 12);
    let ds = Dataset::cached(m.split(SplitRatios::default(), 0).unwrap(), 16).unwrap();
    let img = ds.image(0).unwrap();
    assert_eq!(img.shape(), &[16, 16, 3]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn augmentation_preserves_shape_and_range(seed in any::<u64>(), side in 3usize..20) {
            let t = random_image(seed, side);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&t, &AugmentConfig::default(), &mut r);
            prop_assert_eq!(out.shape(), t.shape());
            prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }

        #[test]
        fn preprocess_stays_in_unit_range(w in 1usize..40, h in 1usize..40, out in 1usize..50, seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<u8> = (0..w * h * 3).map(|_| r.random()).collect();
            let t = preprocess(&RawImage::new(w, h, px).unwrap(), out).unwrap();
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
