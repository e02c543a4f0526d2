//! Synthetic datasets in the on-disk case layout with a tunable class signal.
//!
//! Every case is a textured background volume with one rectangular lesion.
//! The subtraction images see a smooth parenchymal enhancement that is shared
//! across the three post-contrast phases, plus the lesion enhancement. Lesion
//! enhancement in post2 and post3 is multiplied by `1 + effect_size` for
//! positive cases, so the class is carried only by enhancement dynamics.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, map_receptors_to_label, BoundingBox, CaseRecord, DatasetError, LabelDecision, LabelRule,
    LesionAnnotation, Receptor, ReceptorStatus, SubtypeLabel, Volume, VolumeSeries,
};
use crate::preprocess::resample_plane;
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom configuration: {0}")]
    Config(String),
    #[error("cannot write phantom at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingWeight {
    pub spacing: (f64, f64),
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_cases: usize,
    pub positive_fraction: f64,
    pub effect_size: f64,
    /// (slices, rows, cols)
    pub volume_shape: (usize, usize, usize),
    pub spacing_mixture: Vec<SpacingWeight>,
    /// Inclusive range of the lesion's in-plane side lengths, in pixels.
    pub lesion_size_range: (usize, usize),
    /// Inclusive range of the number of slices the lesion spans.
    pub lesion_slice_range: (usize, usize),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_cases: 120,
            positive_fraction: 1.0 / 3.0,
            effect_size: 2.0,
            volume_shape: (8, 96, 96),
            spacing_mixture: vec![
                SpacingWeight {
                    spacing: (0.7, 0.7),
                    weight: 0.25,
                },
                SpacingWeight {
                    spacing: (0.75, 0.75),
                    weight: 0.5,
                },
                SpacingWeight {
                    spacing: (0.8, 0.8),
                    weight: 0.25,
                },
            ],
            lesion_size_range: (14, 24),
            lesion_slice_range: (1, 1),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        if !(self.effect_size >= 0.0) || !self.effect_size.is_finite() {
            return bad(format!(
                "effect_size must be non-negative, got {}",
                self.effect_size
            ));
        }
        let (s, r, c) = self.volume_shape;
        if s == 0 || r == 0 || c == 0 {
            return bad("volume_shape entries must be positive".into());
        }
        if self.spacing_mixture.is_empty() {
            return bad("spacing_mixture is empty".into());
        }
        let total: f64 = self.spacing_mixture.iter().map(|w| w.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.spacing_mixture.iter().any(|w| !(w.weight >= 0.0)) {
            return bad(format!(
                "spacing weights must be non-negative and sum to 1, got {total}"
            ));
        }
        if self
            .spacing_mixture
            .iter()
            .any(|w| !(w.spacing.0 > 0.0 && w.spacing.1 > 0.0))
        {
            return bad("spacings must be positive".into());
        }
        let (lo, hi) = self.lesion_size_range;
        if lo == 0 || lo > hi || hi + 4 > r.min(c) {
            return bad(format!(
                "lesion_size_range ({lo}, {hi}) must be non-empty and fit in the slice"
            ));
        }
        let (slo, shi) = self.lesion_slice_range;
        if slo == 0 || slo > shi || shi > s || shi > dataset::MAX_BOXES {
            return bad(format!(
                "lesion_slice_range ({slo}, {shi}) must lie in 1..={}",
                s.min(dataset::MAX_BOXES)
            ));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        (self.n_cases as f64 * self.positive_fraction).round() as usize
    }

    /// Cases per spacing by largest remainder, so every count is within one
    /// of its expectation and the counts sum to `n_cases`.
    pub fn spacing_counts(&self) -> Vec<usize> {
        let n = self.n_cases as f64;
        let exact: Vec<f64> = self.spacing_mixture.iter().map(|w| w.weight * n).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = self.n_cases - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }
}

/// Bilinearly upsampled uniform noise in [-1, 1] on a `cells x cells` grid.
pub(crate) fn smooth_field(rng: &mut impl Rng, rows: usize, cols: usize, cells: usize) -> Vec<f32> {
    let grid: Vec<f32> = (0..cells * cells)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    resample_plane(
        &grid,
        cells,
        cells,
        rows,
        cols,
        (cells as f64 / rows as f64, cells as f64 / cols as f64),
    )
}

fn receptors_for(positive: bool, rng: &mut impl Rng) -> ReceptorStatus {
    use Receptor::{Negative as N, Positive as P};
    let options: &[(Receptor, Receptor, Receptor)] = if positive {
        &[(P, P, N), (P, N, N), (N, P, N)]
    } else {
        &[(N, N, N), (P, P, P), (P, N, P), (N, N, P)]
    };
    let (er, pr, her2) = *options.choose(rng).expect("non-empty");
    ReceptorStatus::new(er, pr, her2)
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

/// One synthetic case. `index` keys the random stream, so cases can be
/// generated independently and in any order.
pub fn generate_case(
    config: &PhantomConfig,
    index: usize,
    positive: bool,
    spacing: (f64, f64),
) -> CaseRecord {
    let mut rng = rng_for(config.seed, "phantom-case", index as u64);
    let (slices, rows, cols) = config.volume_shape;
    let plane = rows * cols;
    let receptors = receptors_for(positive, &mut rng);

    let (lo, hi) = config.lesion_size_range;
    let h = rng.gen_range(lo..=hi);
    let w = rng.gen_range(lo..=hi);
    let jitter_r = (rows / 8).min(rows - h - 2) as i64;
    let jitter_c = (cols / 8).min(cols - w - 2) as i64;
    let row_min = ((rows - h) as i64 / 2 + rng.gen_range(-jitter_r / 2..=jitter_r / 2))
        .clamp(1, (rows - h - 1) as i64) as usize;
    let col_min = ((cols - w) as i64 / 2 + rng.gen_range(-jitter_c / 2..=jitter_c / 2))
        .clamp(1, (cols - w - 1) as i64) as usize;
    let depth = rng.gen_range(config.lesion_slice_range.0..=config.lesion_slice_range.1);
    let first_slice = rng.gen_range(0..=slices - depth);

    let amplitude = rng.gen_range(25.0..45.0);
    let late = 1.0 + if positive { config.effect_size } else { 0.0 };
    let gains = [
        1.0,
        late * rng.gen_range(0.9..1.1),
        late * rng.gen_range(0.9..1.1),
    ];
    let parenchyma_gain = [1.0, rng.gen_range(1.0..1.1), rng.gen_range(1.05..1.2)];

    let mut pre = Volume::zeros(config.volume_shape);
    let mut posts = [pre.clone(), pre.clone(), pre.clone()];
    for s in 0..slices {
        let anatomy = smooth_field(&mut rng, rows, cols, 10);
        let parenchyma = smooth_field(&mut rng, rows, cols, 8);
        let lesion_texture = smooth_field(&mut rng, rows, cols, 12);
        let in_lesion = s >= first_slice && s < first_slice + depth;
        let base: Vec<f32> = (0..plane)
            .map(|i| 100.0 + 15.0 * anatomy[i] + rng.gen_range(-2.0..2.0))
            .collect();
        pre.slice_mut(s).copy_from_slice(&base);
        for (k, post) in posts.iter_mut().enumerate() {
            let out = post.slice_mut(s);
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let mut v = base[i] as f64
                        + 20.0 * parenchyma_gain[k] * (1.0 + parenchyma[i] as f64)
                        + rng.gen_range(-2.0..2.0);
                    if in_lesion
                        && (row_min..row_min + h).contains(&r)
                        && (col_min..col_min + w).contains(&c)
                    {
                        v += amplitude * gains[k] * (1.0 + 0.25 * lesion_texture[i] as f64);
                    }
                    out[i] = v as f32;
                }
            }
        }
    }
    let boxes = (first_slice..first_slice + depth)
        .map(|s| BoundingBox::new(s, row_min, col_min, row_min + h - 1, col_min + w - 1))
        .collect();
    let [post1, post2, post3] = posts;
    CaseRecord {
        case_id: case_id(index),
        receptors,
        label: SubtypeLabel::from_positive(positive),
        series: VolumeSeries {
            pre,
            post1,
            post2,
            post3,
            pixel_spacing: spacing,
        },
        annotation: LesionAnnotation::new(boxes).expect("1..=5 boxes"),
    }
}

/// Labels and spacings of every case, in case order.
pub fn case_plan(config: &PhantomConfig) -> Vec<(bool, (f64, f64))> {
    let n = config.n_cases;
    let mut labels: Vec<bool> = (0..n).map(|i| i < config.n_positive()).collect();
    labels.shuffle(&mut rng_for(config.seed, "phantom-labels", 0));
    let mut spacings: Vec<(f64, f64)> = config
        .spacing_mixture
        .iter()
        .zip(config.spacing_counts())
        .flat_map(|(w, count)| std::iter::repeat(w.spacing).take(count))
        .collect();
    spacings.shuffle(&mut rng_for(config.seed, "phantom-spacings", 0));
    labels.into_iter().zip(spacings).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhantomSummary {
    pub n_cases: usize,
    pub n_positive: usize,
}

/// Writes the dataset tree and `phantom_config.json` under `out_root`.
pub fn generate_phantom(config: &PhantomConfig, out_root: &Path) -> Result<PhantomSummary> {
    config.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PhantomError::Io { path, source }
    };
    fs::create_dir_all(out_root).map_err(io(out_root))?;
    let rule = LabelRule::default();
    let mut label_rows = Vec::with_capacity(config.n_cases);
    let plan = case_plan(config);
    for (i, &(positive, spacing)) in plan.iter().enumerate() {
        let case = generate_case(config, i, positive, spacing);
        debug_assert_eq!(
            map_receptors_to_label(case.receptors, &rule).ok(),
            Some(LabelDecision::Label(case.label))
        );
        dataset::write_case(out_root, &case).map_err(|e| match e {
            DatasetError::Io { path, source } => PhantomError::Io { path, source },
            other => PhantomError::Dataset(other),
        })?;
        label_rows.push((case.case_id, case.receptors));
    }
    dataset::write_labels(out_root, label_rows.iter().map(|(id, r)| (id.as_str(), *r)))?;
    let echo = out_root.join("phantom_config.json");
    fs::write(
        &echo,
        serde_json::to_string_pretty(config).expect("config serializes"),
    )
    .map_err(io(&echo))?;
    Ok(PhantomSummary {
        n_cases: config.n_cases,
        n_positive: plan.iter().filter(|(p, _)| *p).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_positive_count() {
        let cfg = PhantomConfig {
            n_cases: 30,
            ..PhantomConfig::default()
        };
        assert_eq!(cfg.n_positive(), 10);
        assert_eq!(case_plan(&cfg).iter().filter(|(p, _)| *p).count(), 10);
    }

    #[test]
    fn spacing_counts_by_largest_remainder() {
        let cfg = PhantomConfig {
            n_cases: 10,
            ..PhantomConfig::default()
        };
        assert_eq!(cfg.spacing_counts(), vec![3, 5, 2]);
        let cfg = PhantomConfig {
            n_cases: 7,
            ..PhantomConfig::default()
        };
        let counts = cfg.spacing_counts();
        assert_eq!(counts.iter().sum::<usize>(), 7);
        for (c, w) in counts.iter().zip(&cfg.spacing_mixture) {
            assert!((*c as f64 - 7.0 * w.weight).abs() <= 1.0);
        }
    }

    #[test]
    fn receptor_choices_reproduce_labels() {
        let rule = LabelRule::default();
        let mut rng = rng_for(0, "t", 0);
        for positive in [true, false] {
            for _ in 0..50 {
                let r = receptors_for(positive, &mut rng);
                assert_eq!(
                    map_receptors_to_label(r, &rule).unwrap(),
                    LabelDecision::Label(SubtypeLabel::from_positive(positive))
                );
            }
        }
    }

    #[test]
    fn lesion_signal_follows_the_effect() {
        let cfg = PhantomConfig {
            effect_size: 2.0,
            volume_shape: (3, 48, 48),
            lesion_size_range: (10, 12),
            ..PhantomConfig::default()
        };
        let mean_excess = |case: &CaseRecord, k: usize| {
            let b = case.annotation.primary_box();
            let s = b.slice_index;
            let post = case.series.posts()[k];
            let (r, c) = b.center();
            post.get(s, r, c) - case.series.pre.get(s, r, c)
        };
        let neg = generate_case(&cfg, 0, false, (0.7, 0.7));
        let pos = generate_case(&cfg, 0, true, (0.7, 0.7));
        assert!(mean_excess(&pos, 2) > 1.8 * mean_excess(&neg, 2));
        assert!(neg.series.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = PhantomConfig::default();
        cfg.spacing_mixture[0].weight = 0.5;
        assert!(cfg.validate().is_err());
        let cfg = PhantomConfig {
            positive_fraction: 1.0,
            ..PhantomConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
