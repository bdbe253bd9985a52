use binlite::data::scan_directory;
use binlite::data::synth::{generate_dataset, Shape};
use binlite::model::{load, read_model, save, write_model};
use binlite::quant::{infer, quantize};
use binlite::train::{evaluate, fit};
use binlite::{
    Arch, ArchPreset, AugmentConfig, Dataset, QuantMode, Split, SplitRatios, Tensor, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

#[test]
fn scan_train_save_quantize_infer() {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("data");
    generate_dataset(&root, &Shape::ALL[..3], 12, 24, 1).unwrap();
    let manifest = scan_directory(&root).unwrap().split(SplitRatios::default(), 1).unwrap();
    assert_eq!(manifest.class_names, ["circle", "square", "triangle"]);
    let data = Dataset::cached(manifest, 16).unwrap();

    let mut g = ArchPreset::new(Arch::ScratchCnn, 0.25, 3)
        .with_input_size(16)
        .build_with_classes(data.class_names().to_vec(), 1)
        .unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 8,
        max_epochs: 2,
        patience: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let report = fit(&mut g, &data, &cfg, |_| {}).unwrap();
    assert!(!report.records.is_empty());

    let path = dir.path().join("m.bnlt");
    save(&g, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, g);
    let before = evaluate(&g, &data, Split::Test, 4).unwrap();
    let after = evaluate(&back, &data, Split::Test, 4).unwrap();
    assert_eq!(before, after);

    let q = quantize(&back, QuantMode::I8Dynamic).unwrap();
    let qpath = dir.path().join("q.bnlt");
    save(&q, &qpath).unwrap();
    let q = load(&qpath).unwrap();
    let batch = data
        .batches(Split::Test, 16, None, 0, &AugmentConfig::disabled())
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    let (one, _) = infer(&q, &batch.images, 1).unwrap();
    let (three, _) = infer(&q, &batch.images, 3).unwrap();
    assert_eq!(one, three);
    for row in one.data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn streaming_and_cached_datasets_yield_identical_batches() {
    let dir = TempDir::new().unwrap();
    generate_dataset(dir.path(), &Shape::ALL[3..6], 7, 20, 2).unwrap();
    let manifest = scan_directory(dir.path()).unwrap().split(SplitRatios::default(), 2).unwrap();
    let cached = Dataset::cached(manifest.clone(), 12).unwrap();
    let streaming = Dataset::streaming(manifest, 12).unwrap();
    let aug = AugmentConfig::default();
    for epoch in 0..2 {
        let a: Vec<_> = cached.batches(Split::Train, 5, Some(9), epoch, &aug).unwrap().map(Result::unwrap).collect();
        let b: Vec<_> = streaming.batches(Split::Train, 5, Some(9), epoch, &aug).unwrap().map(Result::unwrap).collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images, y.images);
            assert_eq!(x.labels, y.labels);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_bytes_round_trip(
        arch in prop_oneof![Just(Arch::ScratchCnn), Just(Arch::MobilenetV2), Just(Arch::Vgg16)],
        width in prop_oneof![Just(0.0625), Just(0.125)],
        classes in 2usize..6,
        size in 32usize..40,
        seed in any::<u64>(),
        mode in prop_oneof![Just(None), Just(Some(QuantMode::F16)), Just(Some(QuantMode::I8Dynamic))],
    ) {
        let g = ArchPreset::new(arch, width, classes).with_input_size(size).build(seed).unwrap();
        let g = match mode {
            Some(m) => quantize(&g, m).unwrap(),
            None => g,
        };
        let mut bytes = Vec::new();
        write_model(&g, &mut bytes).unwrap();
        let back = read_model(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, size, size, 3], |_| r.random::<f32>()).unwrap();
        prop_assert_eq!(back.predict(&x).unwrap(), g.predict(&x).unwrap());
    }

    #[test]
    fn predictions_are_distributions(seed in any::<u64>(), classes in 2usize..8) {
        let g = ArchPreset::new(Arch::ScratchCnn, 0.125, classes).with_input_size(8).build(seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::from_fn(&[3, 8, 8, 3], |_| r.random::<f32>()).unwrap();
        let p = g.predict(&x).unwrap();
        prop_assert_eq!(p.shape(), &[3, classes]);
        for row in p.data().chunks(classes) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
