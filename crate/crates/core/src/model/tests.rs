use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::FormatError;
use crate::layers::{Layer, LayerKind, LayerSpec};
use crate::tensor::{ConvSpec, Padding, Tensor};

fn random_batch(n: usize, side: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, side, side, 3], |_| r.random::<f32>()).unwrap()
}

fn small_scratch() -> ModelGraph {
    ArchPreset::new(Arch::ScratchCnn, 0.25, 6)
        .with_input_size(32)
        .build(7)
        .unwrap()
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = small_scratch();
    let b = small_scratch();
    assert_eq!(a, b);
    let c = ArchPreset::new(Arch::ScratchCnn, 0.25, 6)
        .with_input_size(32)
        .build(8)
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn scratch_full_size_builds_with_six_way_softmax() {
    let g = ArchPreset::new(Arch::ScratchCnn, 1.0, 6).build(0).unwrap();
    assert_eq!(g.input_shape, [224, 224, 3]);
    assert!(matches!(g.layers.last().unwrap().kind(), LayerKind::Softmax));
    assert_eq!(g.shapes().unwrap().last().unwrap(), &vec![6]);
    // Three blocks of eight layers, flatten, dense, softmax.
    assert_eq!(g.layers.len(), 3 * 8 + 3);
}

#[test]
fn vgg_width_multiplier_scales_channels() {
    let g = ArchPreset::new(Arch::Vgg16, 0.125, 10)
        .with_input_size(32)
        .build(0)
        .unwrap();
    let convs: Vec<usize> = g
        .layers
        .iter()
        .filter_map(|l| match l.kind() {
            LayerKind::Conv { spec, .. } => Some(spec.out_channels),
            _ => None,
        })
        .collect();
    let full = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    let expected: Vec<usize> = full.iter().map(|c: &usize| c.div_ceil(8)).collect();
    assert_eq!(convs, expected);
}

#[test]
fn zero_channel_width_is_a_config_error() {
    let err = ArchPreset::new(Arch::ScratchCnn, 1e-6, 6).with_input_size(32).build(0);
    assert!(err.is_ok(), "ceil keeps at least one channel");
    let err = ArchPreset::new(Arch::ScratchCnn, 0.0, 6).build(0);
    assert!(matches!(err, Err(Error::Config(_))));
    let err = ArchPreset::new(Arch::ScratchCnn, 0.5, 1).build(0);
    assert!(matches!(err, Err(Error::Config(_))));
}

/// Independent count of a MobileNetV2 body: BN contributes gamma and beta.
fn mobilenet_body_closed_form(width: f64) -> usize {
    let ch = |c: usize| ((c as f64 * width) - 1e-9).ceil() as usize;
    let bn = |c: usize| 2 * c;
    let stem = ch(32);
    let mut total = 27 * stem + bn(stem);
    let mut cin = stem;
    for (t, c, n, _) in [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ] {
        let cout = ch(c);
        for _ in 0..n {
            let hidden = cin * t;
            if t != 1 {
                total += cin * hidden + bn(hidden);
            }
            total += 9 * hidden + bn(hidden);
            total += hidden * cout + bn(cout);
            cin = cout;
        }
    }
    total + cin * 1280 + bn(1280)
}

#[test]
fn mobilenet_body_count_matches_closed_form() {
    let g = ArchPreset::new(Arch::MobilenetV2, 1.0, 6)
        .with_input_size(32)
        .build(0)
        .unwrap();
    assert_eq!(g.body_param_count(), mobilenet_body_closed_form(1.0));
    assert_eq!(g.body_param_count(), 2_223_872);
    let q = ArchPreset::new(Arch::MobilenetV2, 0.25, 6)
        .with_input_size(32)
        .build(0)
        .unwrap();
    assert_eq!(q.body_param_count(), mobilenet_body_closed_form(0.25));
}

#[test]
fn mobilenet_has_seventeen_bottlenecks_with_residuals() {
    let g = ArchPreset::new(Arch::MobilenetV2, 1.0, 6)
        .with_input_size(32)
        .build(0)
        .unwrap();
    let depthwise = g
        .layers
        .iter()
        .filter(|l| matches!(l.kind(), LayerKind::DepthwiseConv { .. }))
        .count();
    let residual = g
        .layers
        .iter()
        .filter(|l| matches!(l.kind(), LayerKind::ResidualAdd { .. }))
        .count();
    assert_eq!(depthwise, 17);
    assert_eq!(residual, 10);
}

#[test]
fn transfer_body_is_frozen_and_head_is_large() {
    let g = ArchPreset::new(Arch::MobilenetTransfer, 1.0, 6)
        .with_input_size(32)
        .build(0)
        .unwrap();
    let body = g.metadata.body_len;
    assert!(g.layers[..body].iter().all(|l| !l.trainable()));
    assert!(g.layers[body..].iter().all(|l| l.trainable()));
    let head = 1280 * 2048 + 2048 + 2 * 2048 + 2048 * 1536 + 1536 + 2 * 1536 + 1536 * 6 + 6;
    assert_eq!(g.param_count(ParamFilter::Trainable), head);
    assert!(head > 5_000_000);
    assert_eq!(g.param_count(ParamFilter::Frozen), g.body_param_count());
}

#[test]
fn freeze_selectors() {
    let mut g = small_scratch();
    let all = g.param_count(ParamFilter::All);
    g.freeze(FreezeSelector::Body);
    let head = g.layers[g.metadata.body_len..]
        .iter()
        .map(|l| l.param_count())
        .sum::<usize>();
    assert_eq!(g.param_count(ParamFilter::Trainable), head);
    assert_eq!(
        g.param_count(ParamFilter::Trainable) + g.param_count(ParamFilter::Frozen),
        all
    );
    g.freeze(FreezeSelector::All);
    assert_eq!(g.param_count(ParamFilter::Trainable), 0);
    assert_eq!(g.first_trainable(), None);
    g.freeze(FreezeSelector::None);
    assert_eq!(g.param_count(ParamFilter::Trainable), all);
}

#[test]
fn predict_rows_are_distributions() {
    let g = small_scratch();
    let p = g.predict(&random_batch(4, 32, 1)).unwrap();
    assert_eq!(p.shape(), &[4, 6]);
    for row in p.data().chunks(6) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn predict_identical_images_give_identical_rows() {
    let g = small_scratch();
    let one = random_batch(1, 32, 2);
    let batch = Tensor::stack(&[one.sample(0).unwrap(), one.sample(0).unwrap(), one.sample(0).unwrap()]).unwrap();
    let p = g.predict(&batch).unwrap();
    assert_eq!(p.data()[0..6], p.data()[6..12]);
    assert_eq!(p.data()[0..6], p.data()[12..18]);
}

#[test]
fn predict_equals_manual_composition() {
    let g = ArchPreset::new(Arch::MobilenetV2, 0.25, 4)
        .with_input_size(32)
        .build(3)
        .unwrap();
    let x = random_batch(2, 32, 3);
    let mut inputs: Vec<Tensor> = Vec::new();
    let mut cur = x.clone();
    for layer in &g.layers {
        inputs.push(cur.clone());
        let skip = match layer.kind() {
            LayerKind::ResidualAdd { from } => Some(&inputs[*from]),
            _ => None,
        };
        cur = layer.infer(&cur, skip).unwrap();
    }
    assert_eq!(g.predict(&x).unwrap(), cur);
}

#[test]
fn predict_rejects_wrong_input_shape() {
    let g = small_scratch();
    assert!(matches!(g.predict(&random_batch(1, 16, 0)), Err(Error::Shape(_))));
}

#[test]
fn invalid_graphs_are_rejected() {
    let meta = small_scratch().metadata;
    let specs = vec![
        LayerSpec::new(LayerKind::Flatten),
        LayerSpec::new(LayerKind::Dense { inputs: 12, units: 3 }),
    ];
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let err = ModelGraph::build(specs.clone(), [2, 2, 3], names.clone(), meta.clone());
    assert!(matches!(err, Err(Error::Config(_))), "missing softmax");

    let mut with_softmax = specs.clone();
    with_softmax.push(LayerSpec::new(LayerKind::Softmax));
    let unsorted: Vec<String> = ["b", "a", "c"].map(String::from).to_vec();
    assert!(ModelGraph::build(with_softmax.clone(), [2, 2, 3], unsorted, meta.clone()).is_err());
    assert!(ModelGraph::build(with_softmax.clone(), [2, 2, 4], names.clone(), meta.clone()).is_err());
    let mut two = meta.clone();
    two.body_len = 1;
    assert!(ModelGraph::build(with_softmax, [2, 2, 3], names, two).is_ok());
}

#[test]
fn residual_shape_mismatch_is_rejected() {
    let meta = small_scratch().metadata;
    let specs = vec![
        LayerSpec::new(LayerKind::Conv {
            spec: ConvSpec::new(3, 1, crate::tensor::Padding::Same, 3, 4),
            bias: true,
        }),
        LayerSpec::new(LayerKind::ResidualAdd { from: 0 }),
        LayerSpec::new(LayerKind::Flatten),
        LayerSpec::new(LayerKind::Dense { inputs: 16, units: 2 }),
        LayerSpec::new(LayerKind::Softmax),
    ];
    let names: Vec<String> = ["a", "b"].map(String::from).to_vec();
    let mut meta = meta;
    meta.body_len = 0;
    assert!(matches!(
        ModelGraph::build(specs, [2, 2, 3], names, meta),
        Err(Error::Shape(_))
    ));
}

fn round_trip(g: &ModelGraph) -> ModelGraph {
    let mut bytes = Vec::new();
    write_model(g, &mut bytes).unwrap();
    read_model(&bytes).unwrap()
}

#[test]
fn save_load_round_trips_presets() {
    for preset in [
        ArchPreset::new(Arch::ScratchCnn, 0.25, 6).with_input_size(32),
        ArchPreset::new(Arch::Vgg16, 0.0625, 3).with_input_size(32),
        ArchPreset::new(Arch::MobilenetV2, 0.25, 6).with_input_size(32),
        ArchPreset::new(Arch::MobilenetTransfer, 0.25, 2).with_input_size(32),
    ] {
        let g = preset.build(11).unwrap();
        let back = round_trip(&g);
        assert_eq!(back, g, "{:?}", preset.arch);
        for (a, b) in g.layers.iter().zip(&back.layers) {
            for (pa, pb) in a.state.params.iter().zip(&b.state.params) {
                let (ta, tb) = (pa.data.as_dense().unwrap(), pb.data.as_dense().unwrap());
                assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}

#[test]
fn save_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bnlt");
    let g = small_scratch();
    save(&g, &path).unwrap();
    assert_eq!(load(&path).unwrap(), g);
    assert!(!dir.path().join("m.bnlt.tmp").exists());
}

#[test]
fn load_errors_are_distinct() {
    let g = small_scratch();
    let mut bytes = Vec::new();
    write_model(&g, &mut bytes).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_model(&bad_magic), Err(Error::Format(FormatError::BadMagic(_)))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        read_model(&bad_version),
        Err(Error::Format(FormatError::VersionMismatch { found: 9, .. }))
    ));

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(read_model(truncated), Err(Error::Format(FormatError::Truncated(_)))));

    let mut corrupt = bytes.clone();
    let mid = bytes.len() - 100;
    corrupt[mid] ^= 0x40;
    assert!(matches!(read_model(&corrupt), Err(Error::Format(FormatError::Checksum { .. }))));

    let mut bad_crc = bytes.clone();
    let last = bad_crc.len() - 1;
    bad_crc[last] ^= 1;
    assert!(matches!(read_model(&bad_crc), Err(Error::Format(FormatError::Checksum { .. }))));
}

#[test]
fn file_size_is_dominated_by_weights() {
    let g = ArchPreset::new(Arch::ScratchCnn, 0.25, 6).build(0).unwrap();
    let mut bytes = Vec::new();
    write_model(&g, &mut bytes).unwrap();
    let buffers: usize = g
        .layers
        .iter()
        .flat_map(|l| &l.state.buffers)
        .map(|b| b.data.len())
        .sum();
    let payload = 4 * (g.param_count(ParamFilter::All) + buffers);
    let overhead = (bytes.len() - payload) as f64 / payload as f64;
    assert!(overhead < 0.02, "overhead {overhead}");
}

#[test]
fn backward_through_residuals_matches_finite_differences() {
    // Two skips share one source, so their gradients must accumulate.
    let kinds = vec![
        LayerKind::pointwise(3, 3, true),
        LayerKind::DepthwiseConv {
            spec: ConvSpec::new(3, 1, Padding::Same, 3, 3),
        },
        LayerKind::ResidualAdd { from: 1 },
        LayerKind::pointwise(3, 3, true),
        LayerKind::ResidualAdd { from: 1 },
        LayerKind::Flatten,
        LayerKind::Dense { inputs: 48, units: 3 },
        LayerKind::Softmax,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers = kinds
        .into_iter()
        .map(|k| Layer::new(LayerSpec::new(k), &mut rng).unwrap())
        .collect();
    let mut metadata = small_scratch().metadata;
    metadata.body_len = 0;
    let names = (0..3).map(|i| format!("c{i}")).collect();
    let g = ModelGraph::from_layers(layers, [4, 4, 3], names, metadata).unwrap();

    let x = random_batch(2, 4, 9);
    let mut rr = ChaCha8Rng::seed_from_u64(1);
    let r = Tensor::from_fn(&[2, 3], |_| rr.random_range(-1.0f32..1.0)).unwrap();
    let objective = |g: &ModelGraph| -> f64 {
        let mut g = g.clone();
        let p = g.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut g0 = g.clone();
    g0.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grads = g0.backward(r.clone()).unwrap();
    assert_eq!(grads.iter().filter(|pg| pg.layer == 0).count(), 2);

    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for pg in &grads {
        let pi = g.layers[pg.layer].state.params.iter().position(|p| p.name == pg.name).unwrap();
        for i in 0..pg.grad.len() {
            let mut plus = g.clone();
            let mut minus = g.clone();
            for (h, sign) in [(&mut plus, 1.0f32), (&mut minus, -1.0f32)] {
                let t = h.layers[pg.layer].state.params[pi].data.as_dense_mut().unwrap();
                t.data_mut()[i] += sign * eps;
            }
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps as f64);
            let analytic = pg.grad.data()[i] as f64;
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-2));
        }
    }
    assert!(worst < 2e-2, "relative error {worst}");
}
