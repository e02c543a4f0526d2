//! Off-the-shelf features: per-tap activations reduced by x-y max pooling,
//! kernel SVMs on top, the per-layer probe and single-feature ranking.

pub mod svm;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{
    compute_auc, crossvalidated_auc, score_patient, CaseSamples, CvOutcome, EvalError, FoldOutcome,
    FoldPlan,
};
use crate::modelzoo::{tap_indices, ArchitectureSpec, Mode, ModelError, TrainedModel};
use crate::preprocess::{Patch, Transform};
use crate::trainers::{resize_and_crop, scaled_resize, TrainError};

pub use svm::{svm_score, train_svm, KernelKind, KernelSpec, SVMModel, Standardizer};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature configuration: {0}")]
    Config(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("{0} rows but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("feature row has {got} columns, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite feature in row {row}")]
    NonFinite { row: usize },
    #[error("feature cache {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTap {
    pub tap_name: String,
    pub expected_length: usize,
}

impl LayerTap {
    pub fn of(spec: &ArchitectureSpec, tap: &str) -> Result<Self> {
        Ok(Self {
            tap_name: tap.to_string(),
            expected_length: spec.tap_shape(tap)?.c,
        })
    }

    /// Every named tap of the architecture, in declaration order.
    pub fn all(spec: &ArchitectureSpec) -> Result<Vec<Self>> {
        spec.tap_names().iter().map(|t| Self::of(spec, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub case_id: String,
    pub slice_index: usize,
    pub patch_index: usize,
}

/// Row-major samples x features matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f32>,
    pub n_cols: usize,
    pub row_keys: Vec<RowKey>,
    pub tap: LayerTap,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_keys.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.data[i * self.n_cols + j] as f64)
            .collect()
    }
}

/// How patches are mapped onto an extractor input: bilinear resize to
/// `resize_to`, then the eval-mode center crop of `crop_to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMapping {
    pub resize_to: usize,
    pub crop_to: usize,
}

impl InputMapping {
    /// 256/224 for a 224 input, scaled proportionally for other inputs.
    pub fn for_spec(spec: &ArchitectureSpec) -> Self {
        let side = spec.input_shape.0;
        Self {
            resize_to: scaled_resize(side),
            crop_to: side,
        }
    }
}

/// Reads one tap for every patch. Spatial taps are max pooled over x-y; fully
/// connected taps are returned as-is. Row order follows `patches`.
pub fn extract_features(
    model: &TrainedModel,
    tap: &LayerTap,
    patches: &[&Patch],
    mapping: InputMapping,
) -> Result<FeatureMatrix> {
    let mut out = extract_many(model, std::slice::from_ref(tap), patches, mapping)?;
    Ok(out.pop().expect("one tap requested"))
}

/// Like [`extract_features`] for several taps with one forward pass per patch.
pub fn extract_many(
    model: &TrainedModel,
    taps: &[LayerTap],
    patches: &[&Patch],
    mapping: InputMapping,
) -> Result<Vec<FeatureMatrix>> {
    let names: Vec<&str> = taps.iter().map(|t| t.tap_name.as_str()).collect();
    let idx = tap_indices(&model.spec, &names)?;
    for t in taps {
        let actual = model.spec.tap_shape(&t.tap_name)?.c;
        if actual != t.expected_length {
            return Err(FeatureError::Dimension {
                expected: t.expected_length,
                got: actual,
            });
        }
    }
    if mapping.crop_to != model.spec.input_shape.0 {
        return Err(FeatureError::Config(format!(
            "crop {} does not match the {}-pixel extractor input",
            mapping.crop_to, model.spec.input_shape.0
        )));
    }
    let net = model.network()?;
    let mut data: Vec<Vec<f32>> = taps
        .iter()
        .map(|t| Vec::with_capacity(patches.len() * t.expected_length))
        .collect();
    for p in patches {
        let x = resize_and_crop(p, mapping.resize_to, mapping.crop_to, Mode::Eval)?;
        let trace = net.forward(&model.params.values, x, Mode::Eval, &idx, false)?;
        for (slot, t) in data.iter_mut().zip(&trace.taps) {
            slot.extend(t.spatial_max());
        }
    }
    let keys: Vec<RowKey> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| RowKey {
            case_id: p.case_id.clone(),
            slice_index: p.slice_index,
            patch_index: i,
        })
        .collect();
    Ok(taps
        .iter()
        .zip(data)
        .map(|(t, d)| FeatureMatrix {
            data: d,
            n_cols: t.expected_length,
            row_keys: keys.clone(),
            tap: t.clone(),
        })
        .collect())
}

/// Provenance of a patch; equal keys imply identical pixels.
#[derive(Debug, Clone, PartialEq)]
struct PatchKey {
    case_id: String,
    slice_index: usize,
    center: (i64, i64),
    transform: Transform,
}

fn key_of(p: &Patch) -> PatchKey {
    PatchKey {
        case_id: p.case_id.clone(),
        slice_index: p.slice_index,
        center: p.center,
        transform: p.transform,
    }
}

/// Rows of one case inside a deduplicated feature matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRows {
    pub case_id: String,
    pub label: bool,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Deduplicates the patches of all cases (repeated evaluation slices and the
/// unaugmented training patch collapse to one row) and records, per case,
/// which rows feed training and which the 25 evaluation scores.
pub fn unique_patches(samples: &[CaseSamples]) -> (Vec<&Patch>, Vec<CaseRows>) {
    let mut unique: Vec<&Patch> = Vec::new();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let first = unique.len();
        let index_of = |p: &Patch, unique: &[&Patch]| -> usize {
            let k = key_of(p);
            match unique[first..].iter().position(|q| key_of(q) == k) {
                Some(i) => first + i,
                None => unique.len(),
            }
        };
        let mut train = Vec::with_capacity(s.train.len());
        let mut eval = Vec::with_capacity(s.eval.len());
        for (is_train, p) in s
            .train
            .iter()
            .map(|p| (true, p))
            .chain(s.eval.iter().map(|p| (false, p)))
        {
            let i = index_of(p, &unique);
            if i == unique.len() {
                unique.push(p);
            }
            if is_train {
                train.push(i);
            } else {
                eval.push(i);
            }
        }
        rows.push(CaseRows {
            case_id: s.case_id.clone(),
            label: s.label,
            train,
            eval,
        });
    }
    (unique, rows)
}

/// Cross-validates SVMs on a feature matrix: each fold fits on the training
/// rows of its training patients and scores every patient from the mean of
/// their 25 evaluation-row decision values.
pub fn features_cv(
    matrix: &FeatureMatrix,
    cases: &[CaseRows],
    plan: &FoldPlan,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<CvOutcome> {
    let by_id: BTreeMap<&str, &CaseRows> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let outcome = crossvalidated_auc(plan, |fold, train_ids, test_ids| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for id in train_ids {
            let c = by_id[id.as_str()];
            for &r in &c.train {
                rows.push(matrix.row_f64(r));
                labels.push(c.label);
            }
        }
        let model = train_svm(&rows, &labels, kernel, seed)?;
        if !model.converged {
            log::warn!(
                "fold {fold}: SMO stopped at the iteration cap ({})",
                model.iterations
            );
        }
        let score = |ids: &[String]| -> Result<Vec<_>> {
            ids.iter()
                .map(|id| {
                    let c = by_id[id.as_str()];
                    let x: Vec<Vec<f64>> = c.eval.iter().map(|&r| matrix.row_f64(r)).collect();
                    let s = svm_score(&model, &x)?;
                    Ok(score_patient(&c.case_id, s, c.label)?)
                })
                .collect()
        };
        Ok(FoldOutcome {
            test: score(test_ids)?,
            train: score(train_ids)?,
        })
    })?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub tap: String,
    pub feature_length: usize,
    pub training_auc: f64,
    pub test_auc: f64,
}

/// One SVM cross-validation per tap, all under the same fold plan.
/// Returns the rows in tap order together with each tap's CV outcome.
pub fn probe_layers(
    model: &TrainedModel,
    taps: &[LayerTap],
    samples: &[CaseSamples],
    plan: &FoldPlan,
    kernel: &KernelSpec,
    mapping: InputMapping,
    seed: u64,
) -> Result<Vec<(ProbeRow, CvOutcome)>> {
    let (patches, cases) = unique_patches(samples);
    info!(
        "probing {} taps on {} unique patches",
        taps.len(),
        patches.len()
    );
    let matrices = extract_many(model, taps, &patches, mapping)?;
    matrices
        .iter()
        .map(|m| {
            let cv = features_cv(m, &cases, plan, kernel, seed)?;
            Ok((
                ProbeRow {
                    tap: m.tap.tap_name.clone(),
                    feature_length: m.n_cols,
                    training_auc: cv.mean_train_auc.unwrap_or(f64::NAN),
                    test_auc: cv.mean_auc,
                },
                cv,
            ))
        })
        .collect()
}

pub fn probe_table_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("tap,feature_length,training_auc,test_auc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.tap, r.feature_length, r.training_auc, r.test_auc
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub rank: usize,
    pub feature_index: usize,
    pub auc: f64,
}

/// AUC of every column used directly as a score over all rows. These values
/// are not cross-validated. Sorted by descending AUC, ties by index.
pub fn rank_single_features(matrix: &FeatureMatrix, labels: &[bool]) -> Result<Vec<RankedFeature>> {
    if labels.len() != matrix.n_rows() {
        return Err(FeatureError::LengthMismatch(matrix.n_rows(), labels.len()));
    }
    let mut scored: Vec<(usize, f64)> = (0..matrix.n_cols)
        .map(|j| Ok((j, compute_auc(&matrix.column(j), labels)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(r, (j, auc))| RankedFeature {
            rank: r + 1,
            feature_index: j,
            auc,
        })
        .collect())
}

pub fn ranking_csv(ranking: &[RankedFeature]) -> String {
    let mut out = String::from("rank,feature_index,auc\n");
    for r in ranking {
        let _ = writeln!(out, "{},{},{}", r.rank, r.feature_index, r.auc);
    }
    out
}

/// Averages the rows of each case's evaluation patches, giving one row per
/// patient in case order.
pub fn patient_mean_rows(matrix: &FeatureMatrix, cases: &[CaseRows]) -> FeatureMatrix {
    let mut data = Vec::with_capacity(cases.len() * matrix.n_cols);
    for c in cases {
        let mut acc = vec![0.0f64; matrix.n_cols];
        for &r in &c.eval {
            for (a, v) in acc.iter_mut().zip(matrix.row(r)) {
                *a += *v as f64;
            }
        }
        data.extend(acc.iter().map(|a| (a / c.eval.len() as f64) as f32));
    }
    FeatureMatrix {
        data,
        n_cols: matrix.n_cols,
        row_keys: cases
            .iter()
            .map(|c| RowKey {
                case_id: c.case_id.clone(),
                slice_index: 0,
                patch_index: 0,
            })
            .collect(),
        tap: matrix.tap.clone(),
    }
}

/// `features_<network>_<tap>_<patch>.f32` with `/` in tap names replaced.
pub fn cache_file_name(network: &str, tap: &str, patch_size: usize) -> String {
    format!(
        "features_{network}_{}_{patch_size}.f32",
        tap.replace('/', "-")
    )
}

pub fn write_feature_cache(
    dir: &Path,
    network: &str,
    patch_size: usize,
    matrix: &FeatureMatrix,
) -> Result<PathBuf> {
    let err = |path: &Path, e: std::io::Error| FeatureError::Cache {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| err(dir, e))?;
    let path = dir.join(cache_file_name(network, &matrix.tap.tap_name, patch_size));
    let bytes: Vec<u8> = matrix.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| err(&path, e))?;
    let mut rows = String::from("case_id,slice,patch_index\n");
    for k in &matrix.row_keys {
        let _ = writeln!(rows, "{},{},{}", k.case_id, k.slice_index, k.patch_index);
    }
    let rows_path = dir.join("rows.csv");
    fs::write(&rows_path, rows).map_err(|e| err(&rows_path, e))?;
    Ok(path)
}

pub fn read_feature_cache(
    dir: &Path,
    network: &str,
    patch_size: usize,
    tap: &LayerTap,
) -> Result<FeatureMatrix> {
    let path = dir.join(cache_file_name(network, &tap.tap_name, patch_size));
    let bad = |path: &Path, msg: String| FeatureError::Cache {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(&path).map_err(|e| bad(&path, e.to_string()))?;
    let rows_path = dir.join("rows.csv");
    let mut reader =
        csv::Reader::from_path(&rows_path).map_err(|e| bad(&rows_path, e.to_string()))?;
    let mut row_keys = Vec::new();
    for rec in reader.deserialize::<(String, usize, usize)>() {
        let (case_id, slice_index, patch_index) =
            rec.map_err(|e| bad(&rows_path, e.to_string()))?;
        row_keys.push(RowKey {
            case_id,
            slice_index,
            patch_index,
        });
    }
    if bytes.len() != 4 * row_keys.len() * tap.expected_length {
        return Err(bad(
            &path,
            format!(
                "{} bytes do not hold {} rows of {} features",
                bytes.len(),
                row_keys.len(),
                tap.expected_length
            ),
        ));
    }
    Ok(FeatureMatrix {
        data: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        n_cols: tap.expected_length,
        row_keys,
        tap: tap.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: Vec<Vec<f32>>) -> FeatureMatrix {
        let n = cols[0].len();
        let d = cols.len();
        let mut data = vec![0.0; n * d];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                data[i * d + j] = *v;
            }
        }
        FeatureMatrix {
            data,
            n_cols: d,
            row_keys: (0..n)
                .map(|i| RowKey {
                    case_id: format!("c{i}"),
                    slice_index: 0,
                    patch_index: 0,
                })
                .collect(),
            tap: LayerTap {
                tap_name: "t".into(),
                expected_length: d,
            },
        }
    }

    #[test]
    fn ranking_examples() {
        let labels = [true, false, true, false, false];
        let y: Vec<f32> = labels.iter().map(|&l| l as u8 as f32).collect();
        let anti: Vec<f32> = y.iter().map(|v| 1.0 - v).collect();
        let m = matrix(vec![vec![0.5; 5], anti, y]);
        let r = rank_single_features(&m, &labels).unwrap();
        assert_eq!(r[0].feature_index, 2);
        assert_eq!(r[0].auc, 1.0);
        assert_eq!(r[1].feature_index, 0);
        assert_eq!(r[1].auc, 0.5);
        assert_eq!((r[2].feature_index, r[2].auc), (1, 0.0));
        assert_eq!(
            ranking_csv(&r).lines().next(),
            Some("rank,feature_index,auc")
        );
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = matrix(vec![vec![1.0, 2.0, 3.0], vec![-1.5, 0.25, 9.0]]);
        write_feature_cache(dir.path(), "cifar", 80, &m).unwrap();
        let back = read_feature_cache(dir.path(), "cifar", 80, &m.tap).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            cache_file_name("googlenet", "incep1", 120),
            "features_googlenet_incep1_120.f32"
        );
    }
}
