//! CNN architectures, parameters and execution.

pub mod checkpoint;
pub mod engine;
pub mod spec;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use engine::{Mode, Network, Scalar, Tensor};
pub use spec::{
    adapt_output_head, build_architecture, build_architecture_named, ArchName, ArchitectureSpec,
    LayerKind, LayerSpec, NamedTap, ParamInfo, Shape, GOOGLENET_TAPS,
};

use crate::util::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("architecture has no fully-connected head")]
    NoHead,
    #[error("output dimension must be at least 2, got {0}")]
    BadOutputDim(usize),
    #[error("unknown tap `{0}`")]
    UnknownTap(String),
    #[error("input shape {got} does not match network input {expected}")]
    InputShape { expected: Shape, got: Shape },
    #[error("parameters do not match the architecture: {0}")]
    ParamMismatch(String),
    #[error("non-finite activation produced by layer `{layer}`")]
    NonFinite { layer: String },
    #[error("label {label} outside 0..{classes}")]
    BadLabel { label: usize, classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Learned tensors, stored in the order produced by shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub init_seed: u64,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f32>>,
}

impl ModelParameters {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.index_of(name).map(|i| self.values[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_against(&self, spec: &ArchitectureSpec) -> Result<()> {
        let infos = spec.param_infos()?;
        if infos.len() != self.names.len() {
            return Err(ModelError::ParamMismatch(format!(
                "spec has {} tensors, parameters have {}",
                infos.len(),
                self.names.len()
            )));
        }
        for (i, info) in infos.iter().enumerate() {
            if info.name != self.names[i]
                || info.shape != self.shapes[i]
                || info.len() != self.values[i].len()
            {
                return Err(ModelError::ParamMismatch(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    info.name, info.shape, self.names[i], self.shapes[i]
                )));
            }
        }
        Ok(())
    }
}

/// Draws one tensor: uniform in `±sqrt(6 / fan_in)` for weights, zeros for biases.
pub fn init_tensor<S: Scalar>(info: &ParamInfo, seed: u64) -> Vec<S> {
    if info.is_bias {
        return vec![S::zero(); info.len()];
    }
    let bound = (6.0 / info.fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    let mut rng = rng_for(seed, &info.name, 0);
    (0..info.len())
        .map(|_| S::of(dist.sample(&mut rng)))
        .collect()
}

pub fn initialize(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParameters> {
    let infos = spec.param_infos()?;
    Ok(ModelParameters {
        init_seed: seed,
        values: infos.iter().map(|i| init_tensor::<f32>(i, seed)).collect(),
        names: infos.iter().map(|i| i.name.clone()).collect(),
        shapes: infos.into_iter().map(|i| i.shape).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// `init`, `pretext`, `scratch` or `transfer`.
    pub regime: String,
    pub epochs: usize,
    /// Constant learning rate per parameter group (`base`, or `head`/`body`).
    pub learning_rates: BTreeMap<String, f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainingMeta {
    pub fn untrained(seed: u64) -> Self {
        Self {
            regime: "init".into(),
            epochs: 0,
            learning_rates: BTreeMap::new(),
            momentum: 0.0,
            batch_size: 0,
            weight_decay: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ArchitectureSpec,
    pub params: ModelParameters,
    pub training_meta: TrainingMeta,
}

impl TrainedModel {
    pub fn initialized(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let params = initialize(&spec, seed)?;
        Ok(Self {
            spec,
            params,
            training_meta: TrainingMeta::untrained(seed),
        })
    }

    pub fn network(&self) -> Result<Network> {
        Network::compile(&self.spec)
    }

    /// Parameter indices belonging to the final fully-connected layer.
    pub fn head_param_indices(&self) -> Vec<usize> {
        let Some(head) = self.spec.head_layer() else {
            return Vec::new();
        };
        let prefix = format!("{head}.");
        (0..self.params.names.len())
            .filter(|&i| self.params.names[i].starts_with(&prefix))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of class probabilities per input.
    pub scores: Vec<Vec<f32>>,
    /// Per requested tap, one activation per input.
    pub taps: Vec<Vec<Tensor<f32>>>,
}

/// Resolves public tap names to layer indices.
pub fn tap_indices(spec: &ArchitectureSpec, taps: &[&str]) -> Result<Vec<usize>> {
    taps.iter()
        .map(|t| {
            let tap = spec.tap(t)?;
            spec.layer_index(&tap.layer)
                .ok_or_else(|| ModelError::UnknownTap(t.to_string()))
        })
        .collect()
}

/// Runs a batch through the model. In train mode each sample gets its own
/// dropout stream derived from the mode seed and its batch position.
pub fn forward(
    model: &TrainedModel,
    batch: &[Tensor<f32>],
    mode: Mode,
    taps: &[&str],
) -> Result<ForwardOutput> {
    let net = model.network()?;
    let idx = tap_indices(&model.spec, taps)?;
    let mut out = ForwardOutput {
        scores: Vec::with_capacity(batch.len()),
        taps: vec![Vec::with_capacity(batch.len()); taps.len()],
    };
    for (i, x) in batch.iter().enumerate() {
        let trace = net.forward(
            &model.params.values,
            x.clone(),
            sample_mode(mode, i),
            &idx,
            false,
        )?;
        let mut scores = trace.output.data;
        if !net.ends_in_softmax() {
            engine::softmax_in_place(&mut scores);
        }
        out.scores.push(scores);
        for (slot, t) in out.taps.iter_mut().zip(trace.taps) {
            slot.push(t);
        }
    }
    Ok(out)
}

fn sample_mode(mode: Mode, i: usize) -> Mode {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train { seed } => Mode::Train {
            seed: derive_seed(seed, "sample", i as u64),
        },
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchStep<S> {
    pub loss: f64,
    pub grads: Vec<Vec<S>>,
    /// Softmax probability of every class, one row per sample.
    pub probs: Vec<Vec<f64>>,
}

/// Weighted-mean softmax cross-entropy over a batch and its parameter
/// gradients. `weights` defaults to 1 per sample.
pub fn batch_loss_and_gradients<S: Scalar>(
    net: &Network,
    params: &[Vec<S>],
    batch: &[Tensor<S>],
    labels: &[usize],
    weights: Option<&[f64]>,
    mode: Mode,
) -> Result<(f64, Vec<Vec<S>>)> {
    let step = batch_step(net, params, batch, labels, weights, mode)?;
    Ok((step.loss, step.grads))
}

/// Same as [`batch_loss_and_gradients`], also returning the class
/// probabilities seen during the pass.
pub fn batch_step<S: Scalar>(
    net: &Network,
    params: &[Vec<S>],
    batch: &[Tensor<S>],
    labels: &[usize],
    weights: Option<&[f64]>,
    mode: Mode,
) -> Result<BatchStep<S>> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    assert_eq!(batch.len(), labels.len(), "one label per sample");
    let classes = net.output_shape().len();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::BadLabel { label, classes });
    }
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..batch.len()).map(w_of).sum();
    let mut grads = net.zero_grads::<S>();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(batch.len());
    let softmax_head = net.ends_in_softmax();
    let top = if softmax_head {
        net.layer_count() - 2
    } else {
        net.layer_count() - 1
    };
    for (i, x) in batch.iter().enumerate() {
        let trace = net.forward(params, x.clone(), sample_mode(mode, i), &[], true)?;
        let logits: Vec<f64> = if softmax_head {
            trace.pre_output.data.iter().map(|v| v.f64()).collect()
        } else {
            trace.output.data.iter().map(|v| v.f64()).collect()
        };
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let wi = w_of(i) / total;
        loss += wi * (lse - logits[labels[i]]);
        let p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        let grad: Vec<S> = p
            .iter()
            .enumerate()
            .map(|(c, pc)| S::of(wi * (pc - if c == labels[i] { 1.0 } else { 0.0 })))
            .collect();
        probs.push(p);
        let shape = if softmax_head {
            trace.pre_output.shape
        } else {
            trace.output.shape
        };
        net.backward(
            params,
            trace,
            top,
            Tensor::new(shape, grad),
            &mut grads,
            false,
        );
    }
    Ok(BatchStep { loss, grads, probs })
}

/// Mean cross-entropy of `model` on a labelled batch (eval mode) and gradients.
pub fn loss_and_gradients(
    model: &TrainedModel,
    batch: &[Tensor<f32>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let net = model.network()?;
    batch_loss_and_gradients(&net, &model.params.values, batch, labels, None, Mode::Eval)
}
