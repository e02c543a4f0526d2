//! End-to-end training regimes: from scratch and transfer fine-tuning.

pub mod pretext;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::compute_auc;
use crate::modelzoo::{
    adapt_output_head, batch_step, init_tensor, ArchName, ArchitectureSpec, Mode, ModelError,
    Network, Shape, Tensor, TrainedModel, TrainingMeta,
};
use crate::preprocess::{resample_plane, Patch};
use crate::util::{derive_seed, rng_for};

pub use pretext::{pretext_pretrain, pretext_sample, PretextConfig, PRETEXT_CLASSES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("training data is empty")]
    Empty,
    #[error("{0} patches but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch} ({detail})")]
    NonFinite { epoch: usize, detail: String },
    #[error("epoch hook failed in epoch {epoch}: {msg}")]
    Hook { epoch: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    32
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_true() -> bool {
    true
}
fn default_epochs() -> usize {
    40
}

/// SGD settings shared by both regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// L2 penalty on weights; biases are not decayed.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Weight each sample by `n / (2 n_class)` in the loss.
    #[serde(default = "default_true")]
    pub inverse_frequency_weights: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            weight_decay: default_weight_decay(),
            inverse_frequency_weights: true,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(
                "weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScratchConfig {
    pub base_learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
}

impl ScratchConfig {
    /// 0.0001 for the original GoogleNet, 0.01 for everything else.
    pub fn for_architecture(name: ArchName) -> Self {
        Self {
            base_learning_rate: if name == ArchName::Googlenet {
                0.0001
            } else {
                0.01
            },
            epochs: default_epochs(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_learning_rate > 0.0) || !self.base_learning_rate.is_finite() {
            return Err(TrainError::Config(format!(
                "base_learning_rate must be positive, got {}",
                self.base_learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

fn default_head_lr() -> f64 {
    0.001
}
fn default_body_lr() -> f64 {
    0.0001
}
fn default_resize() -> usize {
    256
}
fn default_crop() -> usize {
    224
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    #[serde(default = "default_head_lr")]
    pub head_learning_rate: f64,
    #[serde(default = "default_body_lr")]
    pub body_learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resize")]
    pub resize_to: usize,
    #[serde(default = "default_crop")]
    pub crop_to: usize,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            head_learning_rate: default_head_lr(),
            body_learning_rate: default_body_lr(),
            epochs: default_epochs(),
            seed: 0,
            resize_to: default_resize(),
            crop_to: default_crop(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TransferConfig {
    /// Defaults with the resize/crop pair scaled to a network input side
    /// (256/224 of the side for the resize).
    pub fn for_input_side(side: usize) -> Self {
        Self {
            resize_to: scaled_resize(side),
            crop_to: side,
            ..Self::default()
        }
    }

    /// Zero rates are allowed here so single groups can be frozen.
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("head_learning_rate", self.head_learning_rate),
            ("body_learning_rate", self.body_learning_rate),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(TrainError::Config(format!(
                    "{name} must be non-negative, got {lr}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.resize_to < self.crop_to || self.crop_to == 0 {
            return Err(TrainError::Config(format!(
                "resize_to ({}) must be at least crop_to ({}) and crop_to positive",
                self.resize_to, self.crop_to
            )));
        }
        self.optimizer.validate()
    }
}

/// `round(side * 256 / 224)`: the resize used in front of a `side` crop.
pub fn scaled_resize(side: usize) -> usize {
    (side as f64 * 256.0 / 224.0).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

/// Per-epoch training curve. `train_auc` is the patient-level AUC of the
/// scores produced while the epoch was being trained (mean over each case's
/// training patches); `test_auc` comes from the optional epoch hook.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_auc,test_auc\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch,
                r.train_loss,
                opt_cell(r.train_auc),
                opt_cell(r.test_auc)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let parse_opt = |s: &str| -> std::result::Result<Option<f64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("{s}: {e}"))
            }
        };
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| e.to_string())?;
            if row.len() != 4 {
                return Err(format!("expected 4 columns, found {}", row.len()));
            }
            records.push(EpochRecord {
                epoch: row[0].parse().map_err(|e| format!("epoch: {e}"))?,
                train_loss: row[1].parse().map_err(|e| format!("train_loss: {e}"))?,
                train_auc: parse_opt(&row[2])?,
                test_auc: parse_opt(&row[3])?,
            });
        }
        Ok(Self { records })
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Called after every epoch with the 1-based epoch number and the current
/// model; may return a held-out AUC for the log.
pub type EpochHook<'a> =
    dyn FnMut(usize, &TrainedModel) -> std::result::Result<Option<f64>, String> + 'a;

/// Converts a patch to a network input of side `side`, bilinearly resizing
/// when the patch size differs.
pub fn patch_input(patch: &Patch, side: usize) -> Tensor<f32> {
    let t = Tensor::from_hwc(&patch.pixels, patch.size, patch.size, 3);
    if patch.size == side {
        t
    } else {
        resize_tensor(&t, side)
    }
}

fn resize_tensor(t: &Tensor<f32>, side: usize) -> Tensor<f32> {
    let Shape { c, h, w } = t.shape;
    let scale = (h as f64 / side as f64, w as f64 / side as f64);
    let mut data = Vec::with_capacity(c * side * side);
    for plane in t.data.chunks_exact(h * w) {
        data.extend(resample_plane(plane, h, w, side, side, scale));
    }
    Tensor::new(Shape::new(c, side, side), data)
}

/// Crop offsets: uniform in `[0, resize_to - crop_to]` per axis in train mode,
/// `floor((resize_to - crop_to) / 2)` in eval mode.
pub fn crop_offsets(resize_to: usize, crop_to: usize, mode: Mode) -> Result<(usize, usize)> {
    if resize_to < crop_to {
        return Err(TrainError::Config(format!(
            "resize_to ({resize_to}) is smaller than crop_to ({crop_to})"
        )));
    }
    let slack = resize_to - crop_to;
    Ok(match mode {
        Mode::Eval => (slack / 2, slack / 2),
        Mode::Train { seed } => {
            let mut rng = rng_for(seed, "crop", 0);
            (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
        }
    })
}

fn crop_tensor(t: &Tensor<f32>, crop_to: usize, (dr, dc): (usize, usize)) -> Tensor<f32> {
    let Shape { c, h: _, w } = t.shape;
    let mut data = Vec::with_capacity(c * crop_to * crop_to);
    for plane in t.data.chunks_exact(t.shape.plane()) {
        for r in 0..crop_to {
            let start = (dr + r) * w + dc;
            data.extend_from_slice(&plane[start..start + crop_to]);
        }
    }
    Tensor::new(Shape::new(c, crop_to, crop_to), data)
}

/// Bilinear resize of a patch to `resize_to` squared, then a `crop_to` crop.
/// Train mode draws the offsets from `seed`; eval mode takes the center crop.
pub fn resize_and_crop(
    patch: &Patch,
    resize_to: usize,
    crop_to: usize,
    mode: Mode,
) -> Result<Tensor<f32>> {
    let offsets = crop_offsets(resize_to, crop_to, mode)?;
    Ok(crop_tensor(
        &patch_input(patch, resize_to),
        crop_to,
        offsets,
    ))
}

fn check_data(patches: &[Patch], labels: &[bool]) -> Result<()> {
    if patches.len() != labels.len() {
        return Err(TrainError::LengthMismatch(patches.len(), labels.len()));
    }
    if patches.is_empty() {
        return Err(TrainError::Empty);
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(TrainError::SingleClass);
    }
    Ok(())
}

fn sample_weights(labels: &[usize], classes: usize, enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; labels.len()];
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    labels
        .iter()
        .map(|&l| labels.len() as f64 / (present * counts[l] as f64))
        .collect()
}

/// Patient-level AUC of positive-class scores grouped by case id, or `None`
/// when a class is missing.
fn grouped_auc(groups: &[&str], scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut acc: BTreeMap<&str, (f64, usize, bool)> = BTreeMap::new();
    for ((g, s), l) in groups.iter().zip(scores).zip(labels) {
        let e = acc.entry(g).or_insert((0.0, 0, *l == 1));
        e.0 += s;
        e.1 += 1;
    }
    let (s, l): (Vec<f64>, Vec<bool>) = acc.values().map(|(t, n, l)| (t / *n as f64, *l)).unzip();
    compute_auc(&s, &l).ok()
}

struct Sgd {
    lrs: Vec<f64>,
    decay: Vec<f64>,
    momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(model: &TrainedModel, lrs: Vec<f64>, opt: &OptimizerConfig) -> Self {
        let decay = model
            .params
            .names
            .iter()
            .map(|n| {
                if n.ends_with(".bias") {
                    0.0
                } else {
                    opt.weight_decay
                }
            })
            .collect();
        Self {
            lrs,
            decay,
            momentum: opt.momentum,
            velocity: model
                .params
                .values
                .iter()
                .map(|v| vec![0.0; v.len()])
                .collect(),
        }
    }

    /// `v = m v - lr (g + wd w); w += v`. Groups with a zero rate are left
    /// untouched so frozen tensors stay bit-identical.
    fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        for (i, (w, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.lrs[i];
            if lr == 0.0 {
                continue;
            }
            let (m, wd) = (self.momentum as f32, self.decay[i] as f32);
            let lr = lr as f32;
            for ((wj, gj), vj) in w.iter_mut().zip(g).zip(self.velocity[i].iter_mut()) {
                *vj = m * *vj - lr * (*gj + wd * *wj);
                *wj += *vj;
            }
        }
    }
}

pub(crate) struct SgdRun<'a> {
    pub(crate) n: usize,
    pub(crate) labels: Vec<usize>,
    pub(crate) groups: Vec<&'a str>,
    pub(crate) epochs: usize,
    pub(crate) seed: u64,
    pub(crate) opt: OptimizerConfig,
}

/// Shared epoch loop. `input(epoch, i)` yields the network input of sample
/// `i` for a 0-based epoch.
pub(crate) fn run_sgd(
    model: &mut TrainedModel,
    run: &SgdRun,
    lrs: Vec<f64>,
    input: &dyn Fn(usize, usize) -> Result<Tensor<f32>>,
    hook: &mut EpochHook,
) -> Result<TrainingLog> {
    let net = model.network()?;
    let classes = net.output_shape().len();
    let weights = sample_weights(&run.labels, classes, run.opt.inverse_frequency_weights);
    let mut sgd = Sgd::new(model, lrs, &run.opt);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..run.n).collect();
    for epoch in 0..run.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(run.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut scores = vec![0.0; run.n];
        for (b, chunk) in order.chunks(run.opt.batch_size).enumerate() {
            let batch: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| input(epoch, i))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| run.labels[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let mode = Mode::Train {
                seed: derive_seed(run.seed, "dropout", (epoch * run.n + b) as u64),
            };
            let step = batch_step(&net, &model.params.values, &batch, &labels, Some(&w), mode)
                .map_err(|e| match e {
                    ModelError::NonFinite { layer } => TrainError::NonFinite {
                        epoch: epoch + 1,
                        detail: format!("layer `{layer}`"),
                    },
                    other => TrainError::Model(other),
                })?;
            if !step.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    detail: format!("batch loss {}", step.loss),
                });
            }
            loss_sum += step.loss * chunk.len() as f64;
            for (&i, p) in chunk.iter().zip(&step.probs) {
                scores[i] = p.get(1).copied().unwrap_or(0.0);
            }
            sgd.step(&mut model.params.values, &step.grads);
        }
        let train_loss = loss_sum / run.n as f64;
        let train_auc = if classes == 2 {
            grouped_auc(&run.groups, &scores, &run.labels)
        } else {
            None
        };
        let test_auc = hook(epoch + 1, model).map_err(|msg| TrainError::Hook {
            epoch: epoch + 1,
            msg,
        })?;
        debug!(
            "epoch {}: loss {train_loss:.5} train auc {train_auc:?} test auc {test_auc:?}",
            epoch + 1
        );
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_auc,
            test_auc,
        });
    }
    Ok(log)
}

pub(crate) fn no_hook(_: usize, _: &TrainedModel) -> std::result::Result<Option<f64>, String> {
    Ok(None)
}

pub(crate) fn meta(
    regime: &str,
    epochs: usize,
    lrs: BTreeMap<String, f64>,
    opt: &OptimizerConfig,
    seed: u64,
) -> TrainingMeta {
    TrainingMeta {
        regime: regime.into(),
        epochs,
        learning_rates: lrs,
        momentum: opt.momentum,
        batch_size: opt.batch_size,
        weight_decay: opt.weight_decay,
        seed,
    }
}

/// Trains `spec` from a seeded random initialization.
pub fn train_scratch(
    spec: &ArchitectureSpec,
    patches: &[Patch],
    labels: &[bool],
    config: &ScratchConfig,
) -> Result<(TrainedModel, TrainingLog)> {
    train_scratch_with_hook(spec, patches, labels, config, &mut no_hook)
}

pub fn train_scratch_with_hook(
    spec: &ArchitectureSpec,
    patches: &[Patch],
    labels: &[bool],
    config: &ScratchConfig,
    hook: &mut EpochHook,
) -> Result<(TrainedModel, TrainingLog)> {
    config.validate()?;
    check_data(patches, labels)?;
    let mut model = TrainedModel::initialized(spec.clone(), config.seed)?;
    let side = spec.input_shape.0;
    let inputs: Vec<Tensor<f32>> = patches.iter().map(|p| patch_input(p, side)).collect();
    let run = SgdRun {
        n: patches.len(),
        labels: labels.iter().map(|&l| l as usize).collect(),
        groups: patches.iter().map(|p| p.case_id.as_str()).collect(),
        epochs: config.epochs,
        seed: config.seed,
        opt: config.optimizer,
    };
    info!(
        "training {} from scratch on {} patches for {} epochs",
        spec.name,
        patches.len(),
        config.epochs
    );
    let lrs = vec![config.base_learning_rate; model.params.len()];
    let input = |_: usize, i: usize| Ok(inputs[i].clone());
    let log = run_sgd(&mut model, &run, lrs, &input, hook)?;
    model.training_meta = meta(
        "scratch",
        config.epochs,
        BTreeMap::from([("base".to_string(), config.base_learning_rate)]),
        &config.optimizer,
        config.seed,
    );
    Ok((model, log))
}

/// Replaces the head with a freshly initialized `new_dim`-way layer. Every
/// other tensor is copied bit for bit. The head stream is keyed by `seed`
/// and differs from the stream used by [`crate::modelzoo::initialize`].
pub fn prepare_transfer_model(
    source: &TrainedModel,
    new_dim: usize,
    seed: u64,
) -> Result<TrainedModel> {
    let spec = adapt_output_head(&source.spec, new_dim)?;
    let infos = spec.param_infos()?;
    let mut model = TrainedModel {
        spec,
        params: source.params.clone(),
        training_meta: source.training_meta.clone(),
    };
    let head_seed = derive_seed(seed, "transfer-head", 0);
    for i in model.head_param_indices() {
        model.params.values[i] = init_tensor::<f32>(&infos[i], head_seed);
        model.params.shapes[i] = infos[i].shape.clone();
    }
    model.params.check_against(&model.spec)?;
    Ok(model)
}

/// Fine-tunes with the head at `head_learning_rate` and everything else at
/// `body_learning_rate`. Each patch is resized once; a fresh random crop is
/// drawn every epoch.
pub fn finetune(
    model: &TrainedModel,
    patches: &[Patch],
    labels: &[bool],
    config: &TransferConfig,
) -> Result<(TrainedModel, TrainingLog)> {
    finetune_with_hook(model, patches, labels, config, &mut no_hook)
}

pub fn finetune_with_hook(
    model: &TrainedModel,
    patches: &[Patch],
    labels: &[bool],
    config: &TransferConfig,
    hook: &mut EpochHook,
) -> Result<(TrainedModel, TrainingLog)> {
    config.validate()?;
    check_data(patches, labels)?;
    let side = model.spec.input_shape.0;
    if config.crop_to != side {
        return Err(TrainError::Config(format!(
            "crop_to {} does not match the {side}-pixel network input",
            config.crop_to
        )));
    }
    let mut model = model.clone();
    let head: Vec<usize> = model.head_param_indices();
    let lrs = (0..model.params.len())
        .map(|i| {
            if head.contains(&i) {
                config.head_learning_rate
            } else {
                config.body_learning_rate
            }
        })
        .collect();
    let resized: Vec<Tensor<f32>> = patches
        .iter()
        .map(|p| patch_input(p, config.resize_to))
        .collect();
    let n = patches.len();
    let run = SgdRun {
        n,
        labels: labels.iter().map(|&l| l as usize).collect(),
        groups: patches.iter().map(|p| p.case_id.as_str()).collect(),
        epochs: config.epochs,
        seed: config.seed,
        opt: config.optimizer,
    };
    let input = |epoch: usize, i: usize| {
        let mode = Mode::Train {
            seed: derive_seed(config.seed, "crop", (epoch * n + i) as u64),
        };
        let offsets = crop_offsets(config.resize_to, config.crop_to, mode)?;
        Ok(crop_tensor(&resized[i], config.crop_to, offsets))
    };
    let log = run_sgd(&mut model, &run, lrs, &input, hook)?;
    model.training_meta = meta(
        "transfer",
        config.epochs,
        BTreeMap::from([
            ("head".to_string(), config.head_learning_rate),
            ("body".to_string(), config.body_learning_rate),
        ]),
        &config.optimizer,
        config.seed,
    );
    Ok((model, log))
}

/// Positive-class probabilities for prepared inputs (eval mode).
pub fn score_inputs(
    net: &Network,
    model: &TrainedModel,
    inputs: &[Tensor<f32>],
) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| {
            let trace = net.forward(&model.params.values, x.clone(), Mode::Eval, &[], false)?;
            let mut out = trace.output.data;
            if !net.ends_in_softmax() {
                crate::modelzoo::engine::softmax_in_place(&mut out);
            }
            Ok(out.get(1).copied().unwrap_or(0.0) as f64)
        })
        .collect()
}
