use radiopipe::experiments::{run_experiment, ExperimentConfig, Regime, SourceSpec};
use radiopipe::modelzoo::{
    adapt_output_head, build_architecture, ArchName, ArchitectureSpec, LayerKind, LayerSpec, Mode,
    Shape, TrainedModel,
};
use radiopipe::phantom::{generate_phantom, PhantomConfig};
use radiopipe::preprocess::{Patch, Transform};
use radiopipe::trainers::{
    crop_offsets, finetune, patch_input, prepare_transfer_model, resize_and_crop, train_scratch,
    OptimizerConfig, ScratchConfig, TransferConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        name: ArchName::Cifar,
        input_shape: (8, 8, 3),
        layers: vec![
            LayerSpec::new(
                "conv1",
                LayerKind::Conv {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("fc", LayerKind::FullyConnected { output_dim: 2 }),
            LayerSpec::new("prob", LayerKind::Softmax),
        ],
        output_dim: 2,
        named_taps: vec![],
    }
}

fn random_patch(rng: &mut ChaCha8Rng, size: usize, case: usize, shift: f32) -> Patch {
    Patch {
        pixels: (0..size * size * 3)
            .map(|_| rng.gen_range(-1.0..1.0) + shift)
            .collect(),
        size,
        case_id: format!("case_{case:04}"),
        slice_index: 0,
        center: (0, 0),
        transform: Transform::IDENTITY,
    }
}

/// Eight separable patches, four per class.
fn toy_set(size: usize) -> (Vec<Patch>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labels: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
    let patches = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| random_patch(&mut rng, size, i, if l { 0.5 } else { -0.5 }))
        .collect();
    (patches, labels)
}

fn toy_config(epochs: usize) -> ScratchConfig {
    ScratchConfig {
        base_learning_rate: 0.05,
        epochs,
        seed: 3,
        optimizer: OptimizerConfig {
            batch_size: 4,
            ..OptimizerConfig::default()
        },
    }
}

#[test]
fn one_epoch_gives_one_record() {
    let (p, l) = toy_set(8);
    let (_, log) = train_scratch(&toy_spec(), &p, &l, &toy_config(1)).unwrap();
    assert_eq!(log.records.len(), 1);
    assert_eq!(log.records[0].epoch, 1);
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let (p, l) = toy_set(8);
    let (a, la) = train_scratch(&toy_spec(), &p, &l, &toy_config(5)).unwrap();
    let (b, lb) = train_scratch(&toy_spec(), &p, &l, &toy_config(5)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(la, lb);
    let mut other = toy_config(5);
    other.seed = 4;
    let (c, _) = train_scratch(&toy_spec(), &p, &l, &other).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn toy_set_is_memorized_within_two_hundred_epochs() {
    let (p, l) = toy_set(8);
    let (_, log) = train_scratch(&toy_spec(), &p, &l, &toy_config(200)).unwrap();
    let first = log.records[0].train_loss;
    let last = log.last().unwrap().train_loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
    assert!(epochs.windows(2).all(|w| w[0] < w[1]));
    for r in &log.records {
        if let Some(a) = r.train_auc {
            assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn transfer_head_is_replaced_and_body_copied() {
    let spec = adapt_output_head(&build_architecture(ArchName::Googlenet), 1000).unwrap();
    let source = TrainedModel::initialized(spec, 1).unwrap();
    assert_eq!(
        source.params.shapes[source.head_param_indices()[0]][0],
        1000
    );
    let out = prepare_transfer_model(&source, 2, 9).unwrap();
    let head = out.head_param_indices();
    assert!(!head.is_empty());
    assert_eq!(out.params.shapes[head[0]][0], 2);
    for i in 0..out.params.len() {
        if !head.contains(&i) {
            assert_eq!(
                out.params.values[i], source.params.values[i],
                "{}",
                out.params.names[i]
            );
        }
    }
    let again = prepare_transfer_model(&source, 2, 9).unwrap();
    assert_eq!(out.params, again.params);

    // A two-way source still gets a fresh head.
    let twice = prepare_transfer_model(&out, 2, 10).unwrap();
    let weight = head[0];
    assert_ne!(twice.params.values[weight], out.params.values[weight]);
    for i in 0..out.params.len() {
        if !head.contains(&i) {
            assert_eq!(twice.params.values[i], out.params.values[i]);
        }
    }
}

fn one_step(head_lr: f64, body_lr: f64) -> (TrainedModel, TrainedModel) {
    let spec = build_architecture(ArchName::Cifar);
    let source = TrainedModel::initialized(spec, 5).unwrap();
    let model = prepare_transfer_model(&source, 2, 1).unwrap();
    let side = model.spec.input_shape.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patches: Vec<Patch> = (0..4)
        .map(|i| random_patch(&mut rng, side, i, if i % 2 == 0 { 0.3 } else { -0.3 }))
        .collect();
    let labels = [true, false, true, false];
    let cfg = TransferConfig {
        head_learning_rate: head_lr,
        body_learning_rate: body_lr,
        epochs: 1,
        ..TransferConfig::for_input_side(side)
    };
    let (tuned, _) = finetune(&model, &patches, &labels, &cfg).unwrap();
    (model, tuned)
}

fn delta(a: &TrainedModel, b: &TrainedModel, idx: &[usize]) -> f64 {
    idx.iter()
        .flat_map(|&i| a.params.values[i].iter().zip(&b.params.values[i]))
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn zero_body_rate_moves_only_the_head() {
    let (before, after) = one_step(0.001, 0.0);
    let head = before.head_param_indices();
    let body: Vec<usize> = (0..before.params.len())
        .filter(|i| !head.contains(i))
        .collect();
    assert_eq!(delta(&before, &after, &body), 0.0);
    assert!(delta(&before, &after, &head) > 0.0);

    let (before, after) = one_step(0.0, 0.0001);
    assert_eq!(delta(&before, &after, &head), 0.0);
    assert!(delta(&before, &after, &body) > 0.0);
}

#[test]
fn default_rates_are_recorded() {
    let d = TransferConfig::default();
    assert_eq!(
        (d.head_learning_rate, d.body_learning_rate),
        (0.001, 0.0001)
    );
    assert_eq!(d.head_learning_rate, 10.0 * d.body_learning_rate);
    let spec = build_architecture(ArchName::Cifar);
    let source = TrainedModel::initialized(spec, 5).unwrap();
    let model = prepare_transfer_model(&source, 2, 1).unwrap();
    let side = model.spec.input_shape.0;
    let (p, l) = toy_set(side);
    let cfg = TransferConfig {
        epochs: 1,
        ..TransferConfig::for_input_side(side)
    };
    let (tuned, _) = finetune(&model, &p, &l, &cfg).unwrap();
    let lrs = &tuned.training_meta.learning_rates;
    assert_eq!(lrs["head"], 0.001);
    assert_eq!(lrs["body"], 0.0001);
}

#[test]
fn crop_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_patch(&mut rng, 40, 0, 0.0);
    for seed in 0..50 {
        let (r, c) = crop_offsets(256, 224, Mode::Train { seed }).unwrap();
        assert!(r <= 32 && c <= 32);
    }
    let t = resize_and_crop(&p, 256, 224, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(t.shape, Shape::new(3, 224, 224));
    assert_eq!(crop_offsets(256, 224, Mode::Eval).unwrap(), (16, 16));
    assert_eq!(
        resize_and_crop(&p, 64, 64, Mode::Train { seed: 2 }).unwrap(),
        patch_input(&p, 64)
    );
    assert!(resize_and_crop(&p, 200, 224, Mode::Eval).is_err());
}

/// Mean test AUC over three training seeds on one 40-case phantom, default
/// 40 epochs. Augmentation is off for both regimes to keep the run short.
fn phantom_auc(regime: Regime, data: &std::path::Path, out: &std::path::Path) -> f64 {
    let mut cfg = ExperimentConfig::new(data.to_path_buf(), regime, out.to_path_buf());
    cfg.architecture = Some(ArchName::Cifar);
    cfg.patch_size = Some(32);
    cfg.k_folds = 2;
    cfg.seeds = vec![0, 1, 2];
    cfg.augmentation.n_extra = 0;
    match regime {
        Regime::Scratch => {
            let mut s = ScratchConfig::for_architecture(ArchName::Cifar);
            s.base_learning_rate = 0.001;
            cfg.scratch = Some(s);
        }
        _ => {
            cfg.transfer = Some(TransferConfig::for_input_side(80));
            cfg.source = Some(SourceSpec::Pretext {
                pretext: Default::default(),
            });
        }
    }
    let rows = run_experiment(&cfg).unwrap().rows;
    assert_eq!(rows.len(), 3);
    rows.iter().map(|r| r.test_auc).sum::<f64>() / 3.0
}

#[test]
fn pretext_transfer_is_not_worse_than_scratch_on_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = PhantomConfig {
        n_cases: 40,
        volume_shape: (3, 48, 48),
        lesion_size_range: (10, 16),
        seed: 21,
        ..PhantomConfig::default()
    };
    generate_phantom(&cfg, &data).unwrap();
    let scratch = phantom_auc(Regime::Scratch, &data, &dir.path().join("scratch"));
    let transfer = phantom_auc(Regime::Transfer, &data, &dir.path().join("transfer"));
    eprintln!("scratch {scratch:.4} transfer {transfer:.4}");
    assert!(
        transfer >= scratch - 0.02,
        "scratch {scratch} transfer {transfer}"
    );
}
