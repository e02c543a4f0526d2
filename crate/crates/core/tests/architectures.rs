use radiopipe::modelzoo::{
    adapt_output_head, build_architecture, forward, tap_indices, ArchName, Mode, Network, Shape,
    Tensor, TrainedModel, GOOGLENET_TAPS,
};

const GOOGLENET_TAP_LENGTHS: [usize; 12] =
    [64, 192, 256, 480, 512, 512, 512, 528, 832, 832, 1024, 1000];

#[test]
fn every_architecture_passes_shape_inference() {
    for name in ArchName::ALL {
        let spec = build_architecture(name);
        let shapes = spec.infer_shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), Shape::new(2, 1, 1), "{name}");
    }
}

#[test]
fn googlenet_tap_lengths() {
    let spec = adapt_output_head(&build_architecture(ArchName::Googlenet), 1000).unwrap();
    let lengths: Vec<usize> = GOOGLENET_TAPS
        .iter()
        .map(|t| spec.tap_shape(t).unwrap().c)
        .collect();
    assert_eq!(lengths, GOOGLENET_TAP_LENGTHS);
    assert_eq!(spec.tap_shape("incep9").unwrap(), Shape::new(1024, 7, 7));
    assert_eq!(spec.tap_shape("conv1").unwrap(), Shape::new(64, 112, 112));
}

#[test]
fn reduced_googlenet_spatial_sizes() {
    let spec = build_architecture(ArchName::GooglenetR);
    assert_eq!(spec.tap_shape("conv1").unwrap(), Shape::new(32, 64, 64));
    assert_eq!(spec.tap_shape("conv2").unwrap(), Shape::new(192, 62, 62));
    assert_eq!(spec.tap_shape("incep1").unwrap(), Shape::new(256, 31, 31));
    assert_eq!(spec.tap_shape("incep9").unwrap(), Shape::new(1024, 7, 7));
}

#[test]
fn cifar_and_vgg_r_geometry() {
    let cifar = build_architecture(ArchName::Cifar);
    assert_eq!(cifar.tap_shape("conv1").unwrap(), Shape::new(32, 80, 80));
    assert_eq!(cifar.tap_shape("conv3").unwrap(), Shape::new(64, 20, 20));
    assert_eq!(cifar.tap_shape("ip1").unwrap(), Shape::new(64, 1, 1));
    let vgg_r = build_architecture(ArchName::VggR);
    assert_eq!(vgg_r.tap_shape("fc6").unwrap(), Shape::new(4096, 1, 1));
    let fc6 = vgg_r
        .param_infos()
        .unwrap()
        .into_iter()
        .find(|p| p.name == "fc6.weight")
        .unwrap();
    assert_eq!(fc6.shape, vec![4096, 64 * 40 * 40]);
}

fn executed_shapes_match_inference(name: ArchName) {
    let spec = build_architecture(name);
    let model = TrainedModel::initialized(spec.clone(), 0).unwrap();
    let taps = spec.tap_names();
    let x = Tensor::new(
        spec.input(),
        (0..spec.input().len())
            .map(|i| ((i % 97) as f32 / 97.0) - 0.5)
            .collect(),
    );
    let out = forward(&model, &[x], Mode::Eval, &taps).unwrap();
    for (tap, acts) in taps.iter().zip(&out.taps) {
        assert_eq!(acts[0].shape, spec.tap_shape(tap).unwrap(), "{name} {tap}");
    }
    assert!((out.scores[0].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    let idx = tap_indices(&spec, &taps).unwrap();
    assert_eq!(idx.len(), taps.len());
    assert_eq!(
        Network::compile(&spec).unwrap().output_shape(),
        Shape::new(2, 1, 1)
    );
}

#[test]
fn cifar_forward_shapes() {
    executed_shapes_match_inference(ArchName::Cifar);
}

#[test]
fn googlenet_r_forward_shapes() {
    executed_shapes_match_inference(ArchName::GooglenetR);
}

#[test]
fn googlenet_forward_shapes() {
    executed_shapes_match_inference(ArchName::Googlenet);
}
