//! Patient-level evaluation: slice and patch protocol, AUC, stratified folds,
//! cross-validation bookkeeping and bootstrap intervals.

mod protocol;

pub use protocol::{
    best_window, build_case_samples, eval_slices, sample_eval_patches, select_slices, CaseSamples,
    SampleOptions, SliceSelection, EVAL_PATCHES, EVAL_SLICES,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::PreprocessError;
use crate::util::{mean, rng_for, short_hash};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("case {0} has no lesion pixels")]
    NoLesion(String),
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("stratification needs at least one case of each class")]
    EmptyClass,
    #[error("duplicate case id `{0}`")]
    DuplicateCase(String),
    #[error("n_bootstrap must be at least 1")]
    NoResamples,
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("expected {expected} patch scores, got {got}")]
    WrongScoreCount { expected: usize, got: usize },
    #[error("fold {fold}: {msg}")]
    Fold { fold: usize, msg: String },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Area under the ROC curve by pair counting, ties counted one half.
///
/// Computed from midranks: with ranks doubled the Mann-Whitney numerator is an
/// exact integer, so the only rounding is the final division.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their 1-based midrank.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_midrank * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// One patient's aggregated test score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub case_id: String,
    pub patch_scores: Vec<f64>,
    pub final_score: f64,
    pub label: bool,
}

/// Averages exactly 25 patch scores (5 slices x 5 patches).
pub fn score_patient(case_id: &str, patch_scores: Vec<f64>, label: bool) -> Result<PatientScore> {
    let expected = EVAL_SLICES * EVAL_PATCHES;
    if patch_scores.len() != expected {
        return Err(EvalError::WrongScoreCount {
            expected,
            got: patch_scores.len(),
        });
    }
    if let Some(index) = patch_scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite { index });
    }
    Ok(PatientScore {
        case_id: case_id.to_string(),
        final_score: mean(&patch_scores),
        patch_scores,
        label,
    })
}

/// Patient-level fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignment.get(case_id).copied()
    }

    /// Case ids of fold `f`, sorted.
    pub fn test_cases(&self, f: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &v)| v == f)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn train_cases(&self, f: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &v)| v != f)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn plan_hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("plan serializes"))
    }
}

/// Shuffles each class with the seed and deals it round-robin over `k` folds.
/// Negatives continue from the fold after the last positive so fold sizes stay
/// balanced as well as class ratios.
pub fn stratified_folds(cases: &[(String, bool)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in cases {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicateCase(id.clone()));
        }
    }
    let mut pos: Vec<&String> = cases.iter().filter(|c| c.1).map(|c| &c.0).collect();
    let mut neg: Vec<&String> = cases.iter().filter(|c| !c.1).map(|c| &c.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::EmptyClass);
    }
    pos.sort();
    neg.sort();
    let mut rng = rng_for(seed, "folds", k as u64);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = BTreeMap::new();
    for (i, id) in pos.iter().chain(neg.iter()).enumerate() {
        assignment.insert((*id).clone(), i % k);
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

/// Scores produced by one fold's model.
#[derive(Debug, Clone, Default)]
pub struct FoldOutcome {
    pub test: Vec<PatientScore>,
    /// Training-fold patients scored by the same model; may be empty.
    pub train: Vec<PatientScore>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub per_fold_auc: Vec<f64>,
    pub mean_auc: f64,
    pub per_fold_train_auc: Vec<Option<f64>>,
    pub mean_train_auc: Option<f64>,
    /// (fold, score) for every held-out patient, in fold then case order.
    pub test_scores: Vec<(usize, PatientScore)>,
}

pub type RunnerError = Box<dyn std::error::Error + Send + Sync>;

fn labels_of(scores: &[PatientScore]) -> (Vec<f64>, Vec<bool>) {
    (
        scores.iter().map(|s| s.final_score).collect(),
        scores.iter().map(|s| s.label).collect(),
    )
}

/// Runs `runner(fold, train_ids, test_ids)` per fold and averages held-out AUCs.
/// The runner must score exactly the held-out patients of its fold.
pub fn crossvalidated_auc<F>(plan: &FoldPlan, mut runner: F) -> Result<CvOutcome>
where
    F: FnMut(usize, &[String], &[String]) -> std::result::Result<FoldOutcome, RunnerError>,
{
    let mut per_fold_auc = Vec::with_capacity(plan.k);
    let mut per_fold_train_auc = Vec::with_capacity(plan.k);
    let mut test_scores = Vec::new();
    for fold in 0..plan.k {
        let test_ids = plan.test_cases(fold);
        let train_ids = plan.train_cases(fold);
        let fold_err = |msg: String| EvalError::Fold { fold, msg };
        let outcome = runner(fold, &train_ids, &test_ids).map_err(|e| fold_err(e.to_string()))?;
        let mut scored: Vec<&str> = outcome.test.iter().map(|s| s.case_id.as_str()).collect();
        scored.sort_unstable();
        if scored != test_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(fold_err(
                "scored patients differ from the held-out fold".into(),
            ));
        }
        let (s, l) = labels_of(&outcome.test);
        per_fold_auc.push(compute_auc(&s, &l).map_err(|e| fold_err(e.to_string()))?);
        per_fold_train_auc.push(if outcome.train.is_empty() {
            None
        } else {
            if outcome
                .train
                .iter()
                .any(|p| plan.fold_of(&p.case_id) == Some(fold))
            {
                return Err(fold_err(
                    "a held-out patient appears among training scores".into(),
                ));
            }
            let (s, l) = labels_of(&outcome.train);
            Some(compute_auc(&s, &l).map_err(|e| fold_err(e.to_string()))?)
        });
        let mut test = outcome.test;
        test.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        test_scores.extend(test.into_iter().map(|p| (fold, p)));
    }
    let train: Option<Vec<f64>> = per_fold_train_auc.iter().copied().collect();
    Ok(CvOutcome {
        mean_auc: mean(&per_fold_auc),
        mean_train_auc: train.map(|t| mean(&t)),
        per_fold_auc,
        per_fold_train_auc,
        test_scores,
    })
}

/// Linear-interpolation percentile of sorted data (the common "type 7" rule).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the AUC, resampling patients with
/// replacement from one seeded stream. Single-class resamples are redrawn.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    n_bootstrap: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_bootstrap < 1 {
        return Err(EvalError::NoResamples);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::BadAlpha(alpha));
    }
    compute_auc(scores, labels)?;
    let n = scores.len();
    let mut rng = rng_for(seed, "bootstrap", 0);
    let mut aucs = Vec::with_capacity(n_bootstrap);
    let mut s = vec![0.0; n];
    let mut l = vec![false; n];
    while aucs.len() < n_bootstrap {
        for j in 0..n {
            let i = rng.gen_range(0..n);
            s[j] = scores[i];
            l[j] = labels[i];
        }
        if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
            continue;
        }
        aucs.push(compute_auc(&s, &l)?);
    }
    aucs.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&aucs, alpha / 2.0).clamp(0.0, 1.0);
    let hi = percentile_sorted(&aucs, 1.0 - alpha / 2.0).clamp(lo, 1.0);
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_bootstrap: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_bootstrap: 2000,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AUCReport {
    pub per_fold_auc: Vec<f64>,
    pub mean_auc: f64,
    pub ci: (f64, f64),
    pub n_bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    pub config_hash: String,
    pub fold_plan_hash: String,
    /// How the interval was formed; reports state it explicitly.
    pub ci_method: String,
    pub per_fold_train_auc: Vec<Option<f64>>,
    pub mean_train_auc: Option<f64>,
}

impl AUCReport {
    /// Adds a pooled-patient bootstrap interval to a cross-validation outcome.
    pub fn from_cv(
        cv: &CvOutcome,
        plan: &FoldPlan,
        bootstrap: BootstrapConfig,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        let scores: Vec<f64> = cv.test_scores.iter().map(|(_, p)| p.final_score).collect();
        let labels: Vec<bool> = cv.test_scores.iter().map(|(_, p)| p.label).collect();
        let ci = bootstrap_ci(
            &scores,
            &labels,
            bootstrap.n_bootstrap,
            bootstrap.alpha,
            seed,
        )?;
        Ok(Self {
            per_fold_auc: cv.per_fold_auc.clone(),
            mean_auc: cv.mean_auc,
            ci,
            n_bootstrap: bootstrap.n_bootstrap,
            alpha: bootstrap.alpha,
            seed,
            config_hash: config_hash.to_string(),
            fold_plan_hash: plan.plan_hash(),
            ci_method: "percentile bootstrap over pooled held-out patients".into(),
            per_fold_train_auc: cv.per_fold_train_auc.clone(),
            mean_train_auc: cv.mean_train_auc,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `case_id,fold,final_score,label` with label 1 for the positive class.
pub fn patient_scores_csv(rows: &[(usize, PatientScore)]) -> String {
    let mut out = String::from("case_id,fold,final_score,label\n");
    for (fold, p) in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.case_id,
            fold,
            p.final_score,
            u8::from(p.label)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            compute_auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            compute_auc(&[0.9, 0.3, 0.2, 0.8], &[true, true, false, false]).unwrap(),
            0.75
        );
        assert_eq!(compute_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            compute_auc(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass { .. })
        ));
        assert!(matches!(
            compute_auc(&[f64::NAN, 0.2], &[true, false]),
            Err(EvalError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn patient_score_is_the_mean_of_25() {
        assert!((score_patient("a", vec![0.7; 25], true).unwrap().final_score - 0.7).abs() < 1e-15);
        let mut v = vec![1.0; 13];
        v.extend(vec![0.0; 12]);
        assert!((score_patient("a", v.clone(), true).unwrap().final_score - 0.52).abs() < 1e-12);
        v.reverse();
        assert!((score_patient("a", v, true).unwrap().final_score - 0.52).abs() < 1e-12);
        assert!(matches!(
            score_patient("a", vec![0.0; 24], false),
            Err(EvalError::WrongScoreCount {
                expected: 25,
                got: 24
            })
        ));
    }

    fn cohort(n_pos: usize, n_neg: usize) -> Vec<(String, bool)> {
        (0..n_pos + n_neg)
            .map(|i| (format!("case_{i:04}"), i < n_pos))
            .collect()
    }

    #[test]
    fn folds_for_the_reference_cohort_are_exact() {
        let cases = cohort(90, 180);
        let plan = stratified_folds(&cases, 10, 3).unwrap();
        for f in 0..10 {
            let ids = plan.test_cases(f);
            let pos = ids
                .iter()
                .filter(|id| cases.iter().any(|(c, l)| c == *id && *l))
                .count();
            assert_eq!((pos, ids.len() - pos), (9, 18));
        }
        assert_eq!(plan, stratified_folds(&cases, 10, 3).unwrap());
        assert_ne!(plan, stratified_folds(&cases, 10, 4).unwrap());
    }

    #[test]
    fn ten_cases_ten_folds() {
        let plan = stratified_folds(&cohort(4, 6), 10, 0).unwrap();
        for f in 0..10 {
            assert_eq!(plan.test_cases(f).len(), 1);
        }
        assert!(matches!(
            stratified_folds(&cohort(4, 6), 1, 0),
            Err(EvalError::BadFoldCount(1))
        ));
        assert!(matches!(
            stratified_folds(&cohort(0, 6), 2, 0),
            Err(EvalError::EmptyClass)
        ));
    }

    #[test]
    fn cv_with_oracle_and_constant_runners() {
        let cases = cohort(20, 40);
        let plan = stratified_folds(&cases, 5, 1).unwrap();
        let label = |id: &str| cases.iter().find(|c| c.0 == id).unwrap().1;
        let oracle = crossvalidated_auc(&plan, |_, _, test| {
            Ok(FoldOutcome {
                test: test
                    .iter()
                    .map(|id| {
                        let y = label(id);
                        score_patient(id, vec![if y { 1.0 } else { 0.0 }; 25], y).unwrap()
                    })
                    .collect(),
                train: vec![],
            })
        })
        .unwrap();
        assert!(oracle.per_fold_auc.iter().all(|&a| a == 1.0));
        assert_eq!(oracle.mean_auc, 1.0);
        assert_eq!(oracle.mean_train_auc, None);
        let constant = crossvalidated_auc(&plan, |_, train, test| {
            assert!(train.iter().all(|t| !test.contains(t)));
            Ok(FoldOutcome {
                test: test
                    .iter()
                    .map(|id| score_patient(id, vec![0.5; 25], label(id)).unwrap())
                    .collect(),
                train: vec![],
            })
        })
        .unwrap();
        assert!(constant.per_fold_auc.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn cv_rejects_scores_for_the_wrong_patients() {
        let cases = cohort(4, 4);
        let plan = stratified_folds(&cases, 2, 1).unwrap();
        let err = crossvalidated_auc(&plan, |_, train, _| {
            Ok(FoldOutcome {
                test: train
                    .iter()
                    .map(|id| score_patient(id, vec![0.5; 25], true).unwrap())
                    .collect(),
                train: vec![],
            })
        });
        assert!(matches!(err, Err(EvalError::Fold { fold: 0, .. })));
    }

    #[test]
    fn bootstrap_basics() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(
            bootstrap_ci(&scores, &labels, 200, 0.05, 1).unwrap(),
            (1.0, 1.0)
        );
        let mixed = [0.9, 0.1, 0.7, 0.8, 0.3, 0.4];
        let ml = [true, true, false, false, true, false];
        let a = bootstrap_ci(&mixed, &ml, 300, 0.1, 9).unwrap();
        assert_eq!(a, bootstrap_ci(&mixed, &ml, 300, 0.1, 9).unwrap());
        assert!(0.0 <= a.0 && a.0 <= a.1 && a.1 <= 1.0);
        assert!(matches!(
            bootstrap_ci(&mixed, &ml, 0, 0.1, 9),
            Err(EvalError::NoResamples)
        ));
        assert!(matches!(
            bootstrap_ci(&mixed, &ml, 10, 1.5, 9),
            Err(EvalError::BadAlpha(_))
        ));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile_sorted(&v, 0.0), 0.0);
        assert_eq!(percentile_sorted(&v, 1.0), 3.0);
        assert!((percentile_sorted(&v, 0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn scores_csv_layout() {
        let p = score_patient("case_0001", vec![0.25; 25], true).unwrap();
        assert_eq!(
            patient_scores_csv(&[(3, p)]),
            "case_id,fold,final_score,label\ncase_0001,3,0.25,1\n"
        );
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = compute_auc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auc(&scores, &labels)).abs() <= 1e-12);
            let exp: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 2.0 - 1.0).collect();
            prop_assert!((compute_auc(&exp, &labels).unwrap() - a).abs() <= 1e-12);
        }

        #[test]
        fn auc_complement_for_distinct_scores(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = rng_for(seed, "t", 0);
            let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen::<f64>() * 0.5).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.gen()).collect();
            prop_assume!(labels.iter().any(|&l| !l));
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let s = compute_auc(&scores, &labels).unwrap() + compute_auc(&scores, &flipped).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn folds_partition_and_balance(n_pos in 1usize..40, n_neg in 1usize..60, k in 2usize..12, seed in any::<u64>()) {
            let cases = cohort(n_pos, n_neg);
            let plan = stratified_folds(&cases, k, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), cases.len());
            let mut total = 0;
            for f in 0..k {
                let ids = plan.test_cases(f);
                total += ids.len();
                let pos = ids.iter().filter(|id| cases.iter().any(|(c, l)| c == *id && *l)).count();
                prop_assert!(pos == n_pos / k || pos == n_pos.div_ceil(k));
                let neg = ids.len() - pos;
                prop_assert!(neg == n_neg / k || neg == n_neg.div_ceil(k));
            }
            prop_assert_eq!(total, cases.len());
        }
    }
}
