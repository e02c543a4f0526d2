#![allow(dead_code)]

use radiopipe::modelzoo::engine::{Mode, Network, Tensor};
use radiopipe::modelzoo::{batch_loss_and_gradients, init_tensor, LayerKind, LayerSpec, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative disagreement between an analytic and a central-difference derivative.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    fn push(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        self.max_rel_err = self.max_rel_err.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }

    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

const STEP: f64 = 1e-5;

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(
        shape,
        (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn objective(net: &Network, params: &[Vec<f64>], x: &Tensor<f64>, r: &[f64], mode: Mode) -> f64 {
    let out = net
        .forward(params, x.clone(), mode, &[], false)
        .unwrap()
        .output;
    out.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks every parameter and input derivative of `L = <r, net(x)>` for a
/// layer stack in isolation.
pub fn check_layers(input: Shape, layers: &[LayerSpec], seed: u64, mode: Mode) -> GradReport {
    let net = Network::from_layers(input, layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| init_tensor::<f64>(p, seed))
        .collect();
    for p in &mut params {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = random_tensor(input, &mut rng);
    let out_len = net.output_shape().len();
    let r: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let trace = net.forward(&params, x.clone(), mode, &[], true).unwrap();
    let top = net.layer_count() - 1;
    let mut grads = net.zero_grads::<f64>();
    let dx = net
        .backward(
            &params,
            trace,
            top,
            Tensor::new(net.output_shape(), r.clone()),
            &mut grads,
            true,
        )
        .unwrap();

    let mut report = GradReport::default();
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t][i];
            params[t][i] = orig + STEP;
            let up = objective(&net, &params, &x, &r, mode);
            params[t][i] = orig - STEP;
            let down = objective(&net, &params, &x, &r, mode);
            params[t][i] = orig;
            report.push(grads[t][i], (up - down) / (2.0 * STEP));
        }
    }
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += STEP;
        let up = objective(&net, &params, &xp, &r, mode);
        xp.data[i] -= 2.0 * STEP;
        let down = objective(&net, &params, &xp, &r, mode);
        report.push(dx.data[i], (up - down) / (2.0 * STEP));
    }
    report
}

/// Checks the cross-entropy gradients of a tiny conv + fully-connected classifier
/// (8x8x3 input) over every parameter.
pub fn check_tiny_classifier(seed: u64) -> GradReport {
    let layers = vec![
        LayerSpec::new(
            "conv",
            LayerKind::Conv {
                filters: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
        ),
        LayerSpec::new("fc", LayerKind::FullyConnected { output_dim: 2 }),
        LayerSpec::new("prob", LayerKind::Softmax),
    ];
    let input = Shape::new(3, 8, 8);
    let net = Network::from_layers(input, &layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| init_tensor::<f64>(p, seed))
        .collect();
    for p in &mut params {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let batch = vec![
        random_tensor(input, &mut rng),
        random_tensor(input, &mut rng),
    ];
    let labels = [0usize, 1];
    let loss = |p: &[Vec<f64>]| {
        batch_loss_and_gradients(&net, p, &batch, &labels, None, Mode::Eval).unwrap()
    };
    let (_, grads) = loss(&params);
    let mut report = GradReport::default();
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t][i];
            params[t][i] = orig + STEP;
            let up = loss(&params).0;
            params[t][i] = orig - STEP;
            let down = loss(&params).0;
            params[t][i] = orig;
            report.push(grads[t][i], (up - down) / (2.0 * STEP));
        }
    }
    report
}

/// One small isolated stack per layer kind.
pub fn layer_kind_cases() -> Vec<(&'static str, Shape, Vec<LayerSpec>, Mode)> {
    let l = LayerSpec::new;
    vec![
        (
            "conv",
            Shape::new(3, 7, 7),
            vec![l(
                "c",
                LayerKind::Conv {
                    filters: 3,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            )],
            Mode::Eval,
        ),
        (
            "max_pool",
            Shape::new(2, 7, 7),
            vec![l(
                "p",
                LayerKind::MaxPool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            )],
            Mode::Eval,
        ),
        (
            "avg_pool",
            Shape::new(2, 7, 7),
            vec![l(
                "p",
                LayerKind::AvgPool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            )],
            Mode::Eval,
        ),
        (
            "inception",
            Shape::new(3, 5, 5),
            vec![l(
                "i",
                LayerKind::Inception {
                    conv1x1: 2,
                    reduce3x3: 2,
                    conv3x3: 3,
                    reduce5x5: 1,
                    conv5x5: 2,
                    pool_proj: 2,
                },
            )],
            Mode::Eval,
        ),
        (
            "fully_connected",
            Shape::new(2, 3, 3),
            vec![l("f", LayerKind::FullyConnected { output_dim: 4 })],
            Mode::Eval,
        ),
        (
            "relu",
            Shape::new(2, 4, 4),
            vec![l("r", LayerKind::Relu)],
            Mode::Eval,
        ),
        (
            "local_response_norm",
            Shape::new(7, 3, 3),
            vec![l(
                "n",
                LayerKind::LocalResponseNorm {
                    size: 5,
                    alpha: 0.5,
                    beta: 0.75,
                    k: 1.0,
                },
            )],
            Mode::Eval,
        ),
        (
            "dropout",
            Shape::new(2, 4, 4),
            vec![l("d", LayerKind::Dropout { rate: 0.4 })],
            Mode::Train { seed: 5 },
        ),
        (
            "softmax",
            Shape::new(6, 1, 1),
            vec![l("s", LayerKind::Softmax)],
            Mode::Eval,
        ),
    ]
}

/// O(n^2) pair counting with ties worth one half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Scans every start position; the earliest maximal window wins.
pub fn exhaustive_window(areas: &[usize], width: usize) -> (usize, usize) {
    let len = width.min(areas.len());
    let mut best = (0, 0, false);
    for start in 0..=areas.len() - len {
        let s: usize = areas[start..start + len].iter().sum();
        if !best.2 || s > best.1 {
            best = (start, s, true);
        }
    }
    (best.0, len)
}

pub fn case_with_boxes(
    boxes: &[radiopipe::dataset::BoundingBox],
    dims: (usize, usize, usize),
    positive: bool,
) -> radiopipe::dataset::CaseRecord {
    use radiopipe::dataset::*;
    let v = Volume::zeros(dims);
    CaseRecord {
        case_id: "case".into(),
        receptors: ReceptorStatus::new(Receptor::Positive, Receptor::Negative, Receptor::Negative),
        label: SubtypeLabel::from_positive(positive),
        series: VolumeSeries {
            pre: v.clone(),
            post1: v.clone(),
            post2: v.clone(),
            post3: v,
            pixel_spacing: (0.75, 0.75),
        },
        annotation: LesionAnnotation::new(boxes.to_vec()).unwrap(),
    }
}

/// A case with up to five boxes on distinct random slices, plus the mask area
/// of each slice computed from the box sizes.
pub fn random_box_case(rng: &mut ChaCha8Rng) -> (radiopipe::dataset::CaseRecord, Vec<usize>) {
    use radiopipe::dataset::BoundingBox;
    use rand::seq::SliceRandom;
    let slices = rng.gen_range(1..14);
    let n_boxes = rng.gen_range(1..=slices.min(5));
    let mut order: Vec<usize> = (0..slices).collect();
    order.shuffle(rng);
    let mut areas = vec![0usize; slices];
    let boxes: Vec<BoundingBox> = order[..n_boxes]
        .iter()
        .map(|&s| {
            let r0 = rng.gen_range(0..10);
            let c0 = rng.gen_range(0..10);
            let b = BoundingBox::new(
                s,
                r0,
                c0,
                r0 + rng.gen_range(0..6),
                c0 + rng.gen_range(0..6),
            );
            areas[s] = b.height() * b.width();
            b
        })
        .collect();
    (case_with_boxes(&boxes, (slices, 16, 16), true), areas)
}
