//! Built-in pretraining substitute: a synthetic four-way task on random
//! images, disjoint from any phantom dataset.
//!
//! Each image holds one elliptical enhancing blob over smooth background
//! texture. The label is the bin of the late/early enhancement ratio of the
//! blob (washout, plateau, persistent, strong), so the network has to learn
//! channel-contrast detectors without ever seeing lesion patches.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{meta, run_sgd, OptimizerConfig, Result, SgdRun, TrainError};
use crate::modelzoo::{adapt_output_head, ArchitectureSpec, Shape, Tensor, TrainedModel};
use crate::phantom::smooth_field;
use crate::util::rng_for;

pub const PRETEXT_CLASSES: usize = 4;

/// Ratio bins, one per class.
const RATIO_BINS: [(f64, f64); PRETEXT_CLASSES] =
    [(0.3, 0.75), (0.8, 1.25), (1.4, 2.2), (2.4, 4.0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub n_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            epochs: 6,
            learning_rate: 0.01,
            seed: 0,
            optimizer: OptimizerConfig {
                inverse_frequency_weights: false,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// Deterministic sample `index` of the pretext stream: a CHW image with
/// channels standardized per image, and its class.
pub fn pretext_sample(side: usize, seed: u64, index: usize) -> (Tensor<f32>, usize) {
    let class = index % PRETEXT_CLASSES;
    let mut rng = rng_for(seed, "pretext", index as u64);
    let (lo, hi) = RATIO_BINS[class];
    let ratio = rng.gen_range(lo..hi);
    let gains = [1.0, ratio.sqrt() * rng.gen_range(0.9..1.1), ratio];
    let amplitude = rng.gen_range(1.5..3.5);
    let cr = rng.gen_range(side as f64 * 0.25..side as f64 * 0.75);
    let cc = rng.gen_range(side as f64 * 0.25..side as f64 * 0.75);
    let ra = rng.gen_range(side as f64 * 0.06..side as f64 * 0.2);
    let rb = rng.gen_range(side as f64 * 0.06..side as f64 * 0.2);
    let texture = smooth_field(&mut rng, side, side, 6);
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for (k, gain) in gains.iter().enumerate() {
        let bg = smooth_field(&mut rng, side, side, 8);
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                let dr = (r as f64 - cr) / ra;
                let dc = (c as f64 - cc) / rb;
                let inside = dr * dr + dc * dc <= 1.0;
                let lesion = if inside {
                    amplitude * gain * (1.0 + 0.2 * texture[i] as f64)
                } else {
                    0.0
                };
                let fine: f64 = rng.gen_range(-0.15..0.15);
                data[k * plane + i] = (bg[i] as f64 + lesion + fine) as f32;
            }
        }
    }
    for ch in data.chunks_exact_mut(plane) {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        let sd = var.sqrt().max(1e-6);
        for v in ch.iter_mut() {
            *v = ((*v as f64 - mean) / sd) as f32;
        }
    }
    (Tensor::new(Shape::new(3, side, side), data), class)
}

/// Trains `spec` with a four-way head on the pretext stream and returns the
/// model, head included; transfer and feature extraction adapt it further.
pub fn pretext_pretrain(spec: &ArchitectureSpec, config: &PretextConfig) -> Result<TrainedModel> {
    if config.n_samples < PRETEXT_CLASSES || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(TrainError::Config(format!(
            "pretext needs at least {PRETEXT_CLASSES} samples, one epoch and a positive rate"
        )));
    }
    config.optimizer.validate()?;
    let spec = adapt_output_head(spec, PRETEXT_CLASSES)?;
    let side = spec.input_shape.0;
    let (inputs, labels): (Vec<Tensor<f32>>, Vec<usize>) = (0..config.n_samples)
        .map(|i| pretext_sample(side, config.seed, i))
        .unzip();
    let ids: Vec<String> = (0..config.n_samples).map(|i| i.to_string()).collect();
    let mut model = TrainedModel::initialized(spec, config.seed)?;
    let run = SgdRun {
        n: config.n_samples,
        labels,
        groups: ids.iter().map(String::as_str).collect(),
        epochs: config.epochs,
        seed: config.seed,
        opt: config.optimizer,
    };
    let lrs = vec![config.learning_rate; model.params.len()];
    let input = |_: usize, i: usize| Ok(inputs[i].clone());
    let log = run_sgd(&mut model, &run, lrs, &input, &mut super::no_hook)?;
    if let (Some(first), Some(last)) = (log.records.first(), log.last()) {
        log::info!(
            "pretext pretraining of {}: loss {:.4} -> {:.4}",
            model.spec.name,
            first.train_loss,
            last.train_loss
        );
    }
    model.training_meta = meta(
        "pretext",
        config.epochs,
        BTreeMap::from([("base".to_string(), config.learning_rate)]),
        &config.optimizer,
        config.seed,
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_and_balanced() {
        let (a, ca) = pretext_sample(32, 5, 7);
        let (b, cb) = pretext_sample(32, 5, 7);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let classes: Vec<usize> = (0..8).map(|i| pretext_sample(16, 1, i).1).collect();
        assert_eq!(classes, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }
}
