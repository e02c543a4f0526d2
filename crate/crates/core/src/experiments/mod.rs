//! Config-driven orchestration of the three regimes (training from scratch,
//! transfer learning, off-the-shelf features) plus the layer probe, feature
//! ranking, ingest and report commands.
//!
//! Every run loads and harmonizes the dataset once, builds one fold plan and
//! reuses it for every grid entry and seed. Each result row carries a config
//! hash that names its `report_<hash>.json`.

pub mod figures;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use figures::{average_curves, emit_figures, FigureInputs};

use crate::dataset::{load_dataset, CaseRecord, DatasetError};
use crate::deepfeatures::{
    extract_features, features_cv, patient_mean_rows, probe_table_csv, rank_single_features,
    ranking_csv, read_feature_cache, unique_patches, write_feature_cache, CaseRows, FeatureError,
    FeatureMatrix, InputMapping, KernelSpec, LayerTap, ProbeRow, RankedFeature,
};
use crate::evaluation::{
    build_case_samples, compute_auc, crossvalidated_auc, patient_scores_csv, score_patient,
    stratified_folds, AUCReport, BootstrapConfig, CaseSamples, CvOutcome, EvalError, FoldOutcome,
    FoldPlan, PatientScore, SampleOptions,
};
use crate::modelzoo::{
    build_architecture, load_checkpoint, save_checkpoint, ArchName, ArchitectureSpec, Mode,
    ModelError, Network, Tensor, TrainedModel,
};
use crate::phantom::PhantomError;
use crate::preprocess::{
    harmonize_case, modal_spacing, write_patch_cache, AugmentationSpec, Patch, PreprocessError,
};
use crate::trainers::{
    finetune_with_hook, patch_input, prepare_transfer_model, pretext_pretrain, resize_and_crop,
    score_inputs, train_scratch_with_hook, PretextConfig, ScratchConfig, TrainError, TrainingLog,
    TransferConfig,
};
use crate::util::{derive_seed, short_hash};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) => 3,
            _ => 1,
        }
    }
}

impl From<DatasetError> for ExperimentError {
    fn from(e: DatasetError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<PreprocessError> for ExperimentError {
    fn from(e: PreprocessError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<PhantomError> for ExperimentError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Scratch,
    Transfer,
    Features,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Transfer => "transfer",
            Regime::Features => "features",
        }
    }
}

/// Where a pretrained network comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// A checkpoint written by `save_checkpoint`.
    Checkpoint { path: PathBuf },
    /// The built-in synthetic pretext task, trained once per architecture.
    Pretext {
        #[serde(default)]
        pretext: PretextConfig,
    },
    /// An untrained network with a 1000-way head.
    Random {
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub architecture: ArchName,
    pub patch_size: usize,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
}

fn default_k() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_true() -> bool {
    true
}
fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub regime: Regime,
    #[serde(default)]
    pub architecture: Option<ArchName>,
    #[serde(default)]
    pub patch_size: Option<usize>,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    /// Features regime only; defaults to the architecture's last tap.
    #[serde(default)]
    pub tap: Option<String>,
    /// Replaces `architecture`/`patch_size`/`kernel` with several entries
    /// evaluated under the same fold plan.
    #[serde(default)]
    pub grid: Vec<GridEntry>,
    #[serde(default = "default_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
    /// One result row per entry and seed. The seed drives initialization,
    /// shuffling, dropout and crops.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub scratch: Option<ScratchConfig>,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub source: Option<SourceSpec>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    /// Test AUC is logged every `eval_every` epochs (and at the last one);
    /// 0 disables it.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub output_dir: PathBuf,
}

/// One resolved grid entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub architecture: ArchName,
    pub patch_size: usize,
    pub kernel: Option<KernelSpec>,
}

impl ExperimentConfig {
    /// A config with every optional field at its default; the caller fills
    /// in architecture, patch size and the regime-specific sections.
    pub fn new(dataset_root: PathBuf, regime: Regime, output_dir: PathBuf) -> Self {
        Self {
            dataset_root,
            regime,
            architecture: None,
            patch_size: None,
            kernel: None,
            tap: None,
            grid: Vec::new(),
            k_folds: default_k(),
            fold_seed: 0,
            seeds: default_seeds(),
            augmentation: AugmentationSpec::default(),
            normalize: true,
            scratch: None,
            transfer: None,
            source: None,
            bootstrap: BootstrapConfig::default(),
            eval_every: default_eval_every(),
            output_dir,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn entries(&self) -> Vec<RunEntry> {
        if self.grid.is_empty() {
            match (self.architecture, self.patch_size) {
                (Some(architecture), Some(patch_size)) => vec![RunEntry {
                    architecture,
                    patch_size,
                    kernel: self.kernel.clone(),
                }],
                _ => Vec::new(),
            }
        } else {
            self.grid
                .iter()
                .map(|g| RunEntry {
                    architecture: g.architecture,
                    patch_size: g.patch_size,
                    kernel: g.kernel.clone().or_else(|| self.kernel.clone()),
                })
                .collect()
        }
    }

    /// Checks everything that can be checked without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if !self.grid.is_empty() && (self.architecture.is_some() || self.patch_size.is_some()) {
            return bad("give either `grid` or `architecture`/`patch_size`, not both".into());
        }
        let entries = self.entries();
        if entries.is_empty() {
            return bad(
                "`architecture` and `patch_size` (or a non-empty `grid`) are required".into(),
            );
        }
        if self.k_folds < 2 {
            return bad(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("`seeds` contains duplicates".into());
        }
        self.augmentation
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.bootstrap.alpha > 0.0 && self.bootstrap.alpha < 1.0)
            || self.bootstrap.n_bootstrap == 0
        {
            return bad("bootstrap needs n_bootstrap >= 1 and alpha in (0, 1)".into());
        }
        match self.regime {
            Regime::Scratch => {
                if self.source.is_some() || self.transfer.is_some() {
                    return bad("the scratch regime takes no `source` or `transfer` section".into());
                }
            }
            Regime::Transfer => {
                if self.source.is_none() {
                    return bad("the transfer regime needs a `source`".into());
                }
                if self.scratch.is_some() {
                    return bad("the transfer regime takes no `scratch` section".into());
                }
            }
            Regime::Features => {
                if self.source.is_none() {
                    return bad("the features regime needs a `source`".into());
                }
                if self.scratch.is_some() || self.transfer.is_some() {
                    return bad("the features regime takes no trainer section".into());
                }
            }
        }
        if let Some(SourceSpec::Checkpoint { path }) = &self.source {
            if !path.is_file() {
                return bad(format!("checkpoint {} does not exist", path.display()));
            }
        }
        if let Some(SourceSpec::Pretext { pretext }) = &self.source {
            if pretext.n_samples < crate::trainers::PRETEXT_CLASSES || pretext.epochs == 0 {
                return bad("pretext source needs n_samples >= 4 and epochs >= 1".into());
            }
        }
        for e in &entries {
            let spec = build_architecture(e.architecture);
            let side = spec.input_shape.0;
            if e.patch_size < 8 {
                return bad(format!("patch_size {} is too small", e.patch_size));
            }
            match self.regime {
                Regime::Scratch => self.scratch_config(e.architecture, 0).validate()?,
                Regime::Transfer => {
                    let t = self.transfer_config(side, 0);
                    t.validate()?;
                    if t.crop_to != side {
                        return bad(format!(
                            "transfer crop_to {} must equal the {side}-pixel input of {}",
                            t.crop_to, e.architecture
                        ));
                    }
                }
                Regime::Features => {
                    let Some(k) = &e.kernel else {
                        return bad(format!(
                            "the features regime needs a kernel for {} / {}",
                            e.architecture, e.patch_size
                        ));
                    };
                    k.validate()?;
                    if let Some(tap) = &self.tap {
                        if spec.tap(tap).is_err() {
                            return bad(format!(
                                "unknown tap `{tap}` for {}; known taps: {}",
                                e.architecture,
                                spec.tap_names().join(", ")
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn scratch_config(&self, arch: ArchName, seed: u64) -> ScratchConfig {
        let mut c = self
            .scratch
            .unwrap_or_else(|| ScratchConfig::for_architecture(arch));
        c.seed = seed;
        c
    }

    fn transfer_config(&self, side: usize, seed: u64) -> TransferConfig {
        let mut c = self
            .transfer
            .unwrap_or_else(|| TransferConfig::for_input_side(side));
        c.seed = seed;
        c
    }

    /// Hash of everything that determines the numbers: the config minus its
    /// paths, plus the dataset fingerprint.
    pub fn base_hash(&self, dataset_fingerprint: &str) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("dataset_root");
            m.insert("dataset".into(), dataset_fingerprint.into());
        }
        short_hash(v.to_string().as_bytes())
    }
}

/// Hash of the raw volumes, labels and annotations of a dataset.
pub fn dataset_fingerprint(cases: &[CaseRecord]) -> String {
    let mut h = Sha256::new();
    for c in cases {
        h.update(c.case_id.as_bytes());
        h.update([u8::from(c.label.is_positive())]);
        let (r, col) = c.series.pixel_spacing;
        h.update(r.to_le_bytes());
        h.update(col.to_le_bytes());
        for v in [
            &c.series.pre,
            &c.series.post1,
            &c.series.post2,
            &c.series.post3,
        ] {
            for x in &v.data {
                h.update(x.to_le_bytes());
            }
        }
        for b in &c.annotation.boxes {
            h.update(format!("{b:?}").as_bytes());
        }
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Dataset after loading and resolution harmonization.
pub struct PreparedData {
    pub cases: Vec<CaseRecord>,
    pub fingerprint: String,
    pub target_spacing: (f64, f64),
    pub skipped: Vec<(String, String)>,
}

pub fn prepare_dataset(root: &Path) -> Result<PreparedData> {
    let ds = load_dataset(root)?;
    let skipped: Vec<(String, String)> = ds
        .skipped
        .iter()
        .map(|s| (s.case_id.clone(), s.reason.to_string()))
        .collect();
    for (id, why) in &skipped {
        log::warn!("skipping case {id}: {why}");
    }
    if ds.cases.is_empty() {
        return Err(ExperimentError::Data(format!(
            "no usable cases under {}",
            root.display()
        )));
    }
    let fingerprint = dataset_fingerprint(&ds.cases);
    let target = modal_spacing(&ds.cases)?;
    let cases = ds
        .cases
        .iter()
        .map(|c| harmonize_case(c, target))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    info!(
        "loaded {} cases ({} skipped), harmonized to {:?} mm",
        cases.len(),
        skipped.len(),
        target
    );
    Ok(PreparedData {
        cases,
        fingerprint,
        target_spacing: target,
        skipped,
    })
}

pub fn build_samples(
    cases: &[CaseRecord],
    patch_size: usize,
    augmentation: AugmentationSpec,
    normalize: bool,
) -> Result<Vec<CaseSamples>> {
    let opts = SampleOptions {
        patch_size,
        augmentation,
        normalize,
    };
    cases
        .iter()
        .map(|c| {
            build_case_samples(c, &opts)
                .map_err(|e| ExperimentError::Data(format!("case {}: {e}", c.case_id)))
        })
        .collect()
}

pub fn fold_plan(cases: &[CaseRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    let ids: Vec<(String, bool)> = cases
        .iter()
        .map(|c| (c.case_id.clone(), c.label.is_positive()))
        .collect();
    stratified_folds(&ids, k, seed).map_err(|e| ExperimentError::Data(e.to_string()))
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub regime: Regime,
    pub architecture: ArchName,
    pub network_input: usize,
    pub patch_size: usize,
    pub kernel: Option<String>,
    pub tap: Option<String>,
    pub seed: u64,
    pub training_auc: Option<f64>,
    pub test_auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub config_hash: String,
    pub fold_plan_hash: String,
}

const RESULTS_HEADER: &str = "regime,architecture,network_input,patch_size,kernel,tap,seed,training_auc,test_auc,ci_low,ci_high,config_hash,fold_plan_hash";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.regime.as_str(),
            r.architecture,
            r.network_input,
            r.patch_size,
            r.kernel.as_deref().unwrap_or(""),
            r.tap.as_deref().unwrap_or(""),
            r.seed,
            r.training_auc.map(|v| v.to_string()).unwrap_or_default(),
            r.test_auc,
            r.ci_low,
            r.ci_high,
            r.config_hash,
            r.fold_plan_hash
        );
    }
    out
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Everything a run leaves behind, besides the files themselves.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    /// Per row: the fold logs of an end-to-end run (empty for features).
    pub logs: Vec<Vec<TrainingLog>>,
    pub reports: Vec<AUCReport>,
    pub fold_plan_hash: String,
    pub results_path: PathBuf,
}

/// Scores of the evaluation patches of a set of cases, computed once per
/// unique patch.
struct EvalInputs {
    cases: Vec<CaseRows>,
    by_id: BTreeMap<String, usize>,
    inputs: BTreeMap<usize, Tensor<f32>>,
}

impl EvalInputs {
    fn new(samples: &[CaseSamples], make: impl Fn(&Patch) -> Result<Tensor<f32>>) -> Result<Self> {
        let (unique, cases) = unique_patches(samples);
        let mut inputs = BTreeMap::new();
        for c in &cases {
            for &i in &c.eval {
                if let std::collections::btree_map::Entry::Vacant(v) = inputs.entry(i) {
                    v.insert(make(unique[i])?);
                }
            }
        }
        let by_id = cases
            .iter()
            .enumerate()
            .map(|(i, c)| (c.case_id.clone(), i))
            .collect();
        Ok(Self {
            cases,
            by_id,
            inputs,
        })
    }

    fn score(
        &self,
        net: &Network,
        model: &TrainedModel,
        ids: &[String],
    ) -> Result<Vec<PatientScore>> {
        let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let c = &self.cases[*self
                .by_id
                .get(id)
                .ok_or_else(|| ExperimentError::Data(format!("no samples for case {id}")))?];
            let mut scores = Vec::with_capacity(c.eval.len());
            for &i in &c.eval {
                let s = match cache.get(&i) {
                    Some(s) => *s,
                    None => {
                        let s =
                            score_inputs(net, model, std::slice::from_ref(&self.inputs[&i]))?[0];
                        cache.insert(i, s);
                        s
                    }
                };
                scores.push(s);
            }
            out.push(score_patient(&c.case_id, scores, c.label)?);
        }
        Ok(out)
    }

    fn auc(&self, net: &Network, model: &TrainedModel, ids: &[String]) -> Result<f64> {
        let s = self.score(net, model, ids)?;
        let scores: Vec<f64> = s.iter().map(|p| p.final_score).collect();
        let labels: Vec<bool> = s.iter().map(|p| p.label).collect();
        Ok(compute_auc(&scores, &labels)?)
    }
}

fn train_set(samples: &[CaseSamples], ids: &[String]) -> (Vec<Patch>, Vec<bool>) {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for s in samples
        .iter()
        .filter(|s| wanted.contains(s.case_id.as_str()))
    {
        for p in &s.train {
            patches.push(p.clone());
            labels.push(s.label);
        }
    }
    (patches, labels)
}

/// Source models, built at most once per architecture.
struct Sources<'a> {
    spec: Option<&'a SourceSpec>,
    cache: BTreeMap<ArchName, TrainedModel>,
    out_dir: PathBuf,
}

/// Head width of randomly initialized sources.
pub const RANDOM_SOURCE_CLASSES: usize = 1000;

impl Sources<'_> {
    fn get(&mut self, arch: ArchName) -> Result<&TrainedModel> {
        if !self.cache.contains_key(&arch) {
            let spec = build_architecture(arch);
            let model = match self.spec {
                None => return Err(ExperimentError::Config("no source configured".into())),
                Some(SourceSpec::Random { seed }) => {
                    // Same head width as an ImageNet classifier, so tap lengths
                    // match a downloaded checkpoint.
                    let spec = crate::modelzoo::adapt_output_head(&spec, RANDOM_SOURCE_CLASSES)?;
                    TrainedModel::initialized(spec, *seed)?
                }
                Some(SourceSpec::Checkpoint { path }) => {
                    let m = load_checkpoint(path)?;
                    if m.spec.name != arch {
                        return Err(ExperimentError::Config(format!(
                            "checkpoint {} holds {}, expected {arch}",
                            path.display(),
                            m.spec.name
                        )));
                    }
                    m
                }
                Some(SourceSpec::Pretext { pretext }) => {
                    info!("pretext pretraining for {arch}");
                    let m = pretext_pretrain(&spec, pretext)?;
                    let path = self.out_dir.join(format!("pretext_{arch}.ckpt"));
                    fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
                    save_checkpoint(&m, &path)?;
                    m
                }
            };
            self.cache.insert(arch, model);
        }
        Ok(&self.cache[&arch])
    }
}

fn entry_hash(base: &str, entry: &RunEntry, tap: Option<&str>, seed: u64) -> String {
    let v = serde_json::json!({"base": base, "entry": entry, "tap": tap, "seed": seed});
    short_hash(v.to_string().as_bytes())
}

fn kernel_label(k: &KernelSpec) -> String {
    k.kind.to_string()
}

/// Runs the configured regime for every entry and seed under one fold plan.
/// Writes `results.csv`, one `report_<hash>.json` and
/// `patient_scores_<hash>.csv` per row, fold training logs for end-to-end
/// regimes, curve figures and `run_metadata.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let data = prepare_dataset(&config.dataset_root)?;
    let plan = fold_plan(&data.cases, config.k_folds, config.fold_seed)?;
    let base = config.base_hash(&data.fingerprint);
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut samples: BTreeMap<usize, Vec<CaseSamples>> = BTreeMap::new();
    let mut sources = Sources {
        spec: config.source.as_ref(),
        cache: BTreeMap::new(),
        out_dir: out.join("sources"),
    };
    let mut features: BTreeMap<(ArchName, usize), (FeatureMatrix, Vec<CaseRows>)> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut all_logs = Vec::new();
    let mut reports = Vec::new();
    for entry in config.entries() {
        if !samples.contains_key(&entry.patch_size) {
            let s = build_samples(
                &data.cases,
                entry.patch_size,
                config.augmentation,
                config.normalize,
            )?;
            samples.insert(entry.patch_size, s);
        }
        let samples = &samples[&entry.patch_size];
        let spec = build_architecture(entry.architecture);
        let side = spec.input_shape.0;
        for &seed in &config.seeds {
            info!(
                "{} / {} / patch {} / seed {seed}",
                config.regime.as_str(),
                entry.architecture,
                entry.patch_size
            );
            let (cv, logs, tap) = match config.regime {
                Regime::Scratch | Regime::Transfer => {
                    let (cv, logs) =
                        run_end_to_end(config, &entry, &spec, samples, &plan, seed, &mut sources)?;
                    (cv, logs, None)
                }
                Regime::Features => {
                    let model = sources.get(entry.architecture)?;
                    let tap_name = config.tap.clone().unwrap_or_else(|| {
                        model.spec.tap_names().last().expect("taps").to_string()
                    });
                    let key = (entry.architecture, entry.patch_size);
                    if !features.contains_key(&key) {
                        let tap = LayerTap::of(&model.spec, &tap_name)?;
                        let (unique, cases) = unique_patches(samples);
                        info!(
                            "extracting `{tap_name}` for {} unique patches",
                            unique.len()
                        );
                        let m = extract_features(
                            model,
                            &tap,
                            &unique,
                            InputMapping::for_spec(&model.spec),
                        )?;
                        let dir = out
                            .join("features")
                            .join(format!("{}_{}", entry.architecture, entry.patch_size));
                        write_feature_cache(
                            &dir,
                            entry.architecture.as_str(),
                            entry.patch_size,
                            &m,
                        )?;
                        features.insert(key, (m, cases));
                    }
                    let (m, cases) = &features[&key];
                    let kernel = entry.kernel.as_ref().expect("validated");
                    let cv = features_cv(m, cases, &plan, kernel, seed)?;
                    (cv, Vec::new(), Some(tap_name))
                }
            };
            let hash = entry_hash(&base, &entry, tap.as_deref(), seed);
            let report = AUCReport::from_cv(&cv, &plan, config.bootstrap, seed, &hash)?;
            report.write_json(&out.join(format!("report_{hash}.json")))?;
            write_file(
                &out.join(format!("patient_scores_{hash}.csv")),
                &patient_scores_csv(&cv.test_scores),
            )?;
            for (k, log) in logs.iter().enumerate() {
                write_file(
                    &out.join(format!("training_log_{hash}_fold{k}.csv")),
                    &log.to_csv(),
                )?;
            }
            if !logs.is_empty() {
                emit_figures(
                    FigureInputs {
                        logs: Some(&logs),
                        ..FigureInputs::default()
                    },
                    out,
                    &format!("{hash}_"),
                )?;
            }
            rows.push(ResultRow {
                regime: config.regime,
                architecture: entry.architecture,
                network_input: side,
                patch_size: entry.patch_size,
                kernel: match config.regime {
                    Regime::Features => entry.kernel.as_ref().map(kernel_label),
                    _ => None,
                },
                tap,
                seed,
                training_auc: cv.mean_train_auc,
                test_auc: cv.mean_auc,
                ci_low: report.ci.0,
                ci_high: report.ci.1,
                config_hash: hash,
                fold_plan_hash: plan.plan_hash(),
            });
            all_logs.push(logs);
            reports.push(report);
        }
    }
    let results_path = out.join("results.csv");
    write_file(&results_path, &results_csv(&rows))?;
    let meta = serde_json::json!({
        "config": config,
        "base_hash": base,
        "dataset_fingerprint": data.fingerprint,
        "target_spacing_mm": [data.target_spacing.0, data.target_spacing.1],
        "skipped_cases": data.skipped,
        "n_cases": data.cases.len(),
        "fold_plan_hash": plan.plan_hash(),
        "decisions": {
            "training_auc": "patient-level AUC on the training-fold patients, scored by that fold's model and averaged over folds",
            "patient_score": "mean of the 25 evaluation-patch scores",
            "ci": "percentile bootstrap over pooled held-out patients",
        },
    });
    write_file(
        &out.join("run_metadata.json"),
        &serde_json::to_string_pretty(&meta).expect("metadata serializes"),
    )?;
    Ok(ExperimentOutput {
        rows,
        logs: all_logs,
        reports,
        fold_plan_hash: plan.plan_hash(),
        results_path,
    })
}

fn run_end_to_end(
    config: &ExperimentConfig,
    entry: &RunEntry,
    spec: &ArchitectureSpec,
    samples: &[CaseSamples],
    plan: &FoldPlan,
    seed: u64,
    sources: &mut Sources,
) -> Result<(CvOutcome, Vec<TrainingLog>)> {
    let side = spec.input_shape.0;
    let transfer = config.transfer_config(side, seed);
    let eval = match config.regime {
        Regime::Scratch => EvalInputs::new(samples, |p| Ok(patch_input(p, side)))?,
        _ => EvalInputs::new(samples, |p| {
            Ok(resize_and_crop(
                p,
                transfer.resize_to,
                transfer.crop_to,
                Mode::Eval,
            )?)
        })?,
    };
    let source = match config.regime {
        Regime::Transfer => Some(sources.get(entry.architecture)?.clone()),
        _ => None,
    };
    let net = Network::compile(&crate::modelzoo::adapt_output_head(spec, 2)?)?;
    let mut logs = Vec::with_capacity(plan.k);
    let cv = crossvalidated_auc(plan, |fold, train_ids, test_ids| {
        let fold_seed = derive_seed(seed, "fold", fold as u64);
        let (patches, labels) = train_set(samples, train_ids);
        let epochs = match config.regime {
            Regime::Scratch => config.scratch_config(entry.architecture, fold_seed).epochs,
            _ => transfer.epochs,
        };
        let mut hook = |epoch: usize,
                        model: &TrainedModel|
         -> std::result::Result<Option<f64>, String> {
            let due = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == epochs);
            if !due {
                return Ok(None);
            }
            eval.auc(&net, model, test_ids)
                .map(Some)
                .map_err(|e| e.to_string())
        };
        let (model, log) = match config.regime {
            Regime::Scratch => {
                let sc = config.scratch_config(entry.architecture, fold_seed);
                let spec2 = crate::modelzoo::adapt_output_head(spec, 2)?;
                train_scratch_with_hook(&spec2, &patches, &labels, &sc, &mut hook)?
            }
            _ => {
                let src = source.as_ref().expect("transfer source");
                let start = prepare_transfer_model(src, 2, fold_seed)?;
                let mut tc = transfer;
                tc.seed = fold_seed;
                finetune_with_hook(&start, &patches, &labels, &tc, &mut hook)?
            }
        };
        if let Some(last) = log.last() {
            info!(
                "fold {fold}: loss {:.4}, train AUC {:?}, test AUC {:?}",
                last.train_loss, last.train_auc, last.test_auc
            );
        }
        logs.push(log);
        Ok(FoldOutcome {
            test: eval.score(&net, &model, test_ids)?,
            train: eval.score(&net, &model, train_ids)?,
        })
    })?;
    Ok((cv, logs))
}

/// Configuration of the layer probe and of the feature ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub dataset_root: PathBuf,
    pub architecture: ArchName,
    pub patch_size: usize,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    /// Ranking only; defaults to the last tap.
    #[serde(default)]
    pub tap: Option<String>,
    #[serde(default = "default_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub source: SourceSpec,
    pub output_dir: PathBuf,
}

impl ProbeConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let spec = build_architecture(self.architecture);
        if let Some(tap) = &self.tap {
            if spec.tap(tap).is_err() {
                return Err(ExperimentError::Config(format!(
                    "unknown tap `{tap}` for {}",
                    self.architecture
                )));
            }
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        if self.k_folds < 2 {
            return Err(ExperimentError::Config("k_folds must be at least 2".into()));
        }
        if let SourceSpec::Checkpoint { path } = &self.source {
            if !path.is_file() {
                return Err(ExperimentError::Config(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
        }
        self.augmentation
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

/// Per-tap SVM cross-validation over every tap of the extractor. Writes
/// `probe_layers.csv` and the bar chart.
pub fn run_probe(config: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    config.validate()?;
    let kernel = config
        .kernel
        .clone()
        .ok_or_else(|| ExperimentError::Config("the layer probe needs a kernel".into()))?;
    let data = prepare_dataset(&config.dataset_root)?;
    let plan = fold_plan(&data.cases, config.k_folds, config.fold_seed)?;
    let samples = build_samples(
        &data.cases,
        config.patch_size,
        config.augmentation,
        config.normalize,
    )?;
    let mut sources = Sources {
        spec: Some(&config.source),
        cache: BTreeMap::new(),
        out_dir: config.output_dir.join("sources"),
    };
    let model = sources.get(config.architecture)?;
    let taps = LayerTap::all(&model.spec)?;
    let result = crate::deepfeatures::probe_layers(
        model,
        &taps,
        &samples,
        &plan,
        &kernel,
        InputMapping::for_spec(&model.spec),
        config.seed,
    )?;
    let rows: Vec<ProbeRow> = result.into_iter().map(|(r, _)| r).collect();
    write_file(
        &config.output_dir.join("probe_layers.csv"),
        &probe_table_csv(&rows),
    )?;
    emit_figures(
        FigureInputs {
            probe: Some(&rows),
            ..FigureInputs::default()
        },
        &config.output_dir,
        "",
    )?;
    Ok(rows)
}

/// Ranks each feature of one tap by its single-feature AUC over patients.
/// Each patient contributes the mean of its evaluation-patch rows. The
/// ranking is fitted and scored on the same patients and is not
/// cross-validated.
pub fn run_ranking(config: &ProbeConfig) -> Result<Vec<RankedFeature>> {
    config.validate()?;
    let data = prepare_dataset(&config.dataset_root)?;
    let samples = build_samples(
        &data.cases,
        config.patch_size,
        config.augmentation,
        config.normalize,
    )?;
    let mut sources = Sources {
        spec: Some(&config.source),
        cache: BTreeMap::new(),
        out_dir: config.output_dir.join("sources"),
    };
    let model = sources.get(config.architecture)?;
    let tap_name = config
        .tap
        .clone()
        .unwrap_or_else(|| model.spec.tap_names().last().expect("taps").to_string());
    let tap = LayerTap::of(&model.spec, &tap_name)?;
    let (unique, cases) = unique_patches(&samples);
    let feature_dir = config.output_dir.join("features");
    let m = match read_feature_cache(
        &feature_dir,
        config.architecture.as_str(),
        config.patch_size,
        &tap,
    ) {
        Ok(m) if m.n_rows() == unique.len() => m,
        _ => {
            let m = extract_features(model, &tap, &unique, InputMapping::for_spec(&model.spec))?;
            write_feature_cache(
                &feature_dir,
                config.architecture.as_str(),
                config.patch_size,
                &m,
            )?;
            m
        }
    };
    let per_patient = patient_mean_rows(&m, &cases);
    let labels: Vec<bool> = cases.iter().map(|c| c.label).collect();
    let ranking = rank_single_features(&per_patient, &labels)?;
    write_file(
        &config.output_dir.join("ranking.csv"),
        &ranking_csv(&ranking),
    )?;
    let meta = serde_json::json!({
        "tap": tap_name,
        "feature_length": tap.expected_length,
        "n_patients": cases.len(),
        "cross_validated": false,
        "aggregation": "per-patient mean of the evaluation-patch feature rows",
    });
    write_file(
        &config.output_dir.join("ranking_meta.json"),
        &serde_json::to_string_pretty(&meta).expect("metadata serializes"),
    )?;
    emit_figures(
        FigureInputs {
            ranking: Some(&ranking),
            ..FigureInputs::default()
        },
        &config.output_dir,
        "",
    )?;
    Ok(ranking)
}

/// Harmonizes a dataset and writes its patch cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub dataset_root: PathBuf,
    pub patch_sizes: Vec<usize>,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub n_cases: usize,
    pub n_positive: usize,
    pub skipped: Vec<(String, String)>,
    pub target_spacing_mm: (f64, f64),
    pub dataset_fingerprint: String,
    /// patch size → patches written
    pub patches: BTreeMap<usize, usize>,
}

pub fn run_ingest(config: &IngestConfig) -> Result<IngestSummary> {
    if config.patch_sizes.is_empty() {
        return Err(ExperimentError::Config(
            "`patch_sizes` must not be empty".into(),
        ));
    }
    config
        .augmentation
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let data = prepare_dataset(&config.dataset_root)?;
    let mut patches = BTreeMap::new();
    for &p in &config.patch_sizes {
        let samples = build_samples(&data.cases, p, config.augmentation, config.normalize)?;
        let all: Vec<Patch> = samples
            .iter()
            .flat_map(|s| s.train.iter().chain(&s.eval).cloned())
            .collect();
        write_patch_cache(&config.output_dir, &all)?;
        patches.insert(p, all.len());
    }
    let summary = IngestSummary {
        n_cases: data.cases.len(),
        n_positive: data.cases.iter().filter(|c| c.label.is_positive()).count(),
        skipped: data.skipped,
        target_spacing_mm: data.target_spacing,
        dataset_fingerprint: data.fingerprint,
        patches,
    };
    write_file(
        &config.output_dir.join("ingest_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Lists the files a figure report is regenerated from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub training_logs: Vec<PathBuf>,
    #[serde(default)]
    pub probe_table: Option<PathBuf>,
    #[serde(default)]
    pub ranking: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn read_csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Regenerates figures from files on disk. Every missing input is listed in
/// one error before anything is read.
pub fn run_report(config: &ReportConfig) -> Result<Vec<PathBuf>> {
    let listed: Vec<&PathBuf> = config
        .training_logs
        .iter()
        .chain(&config.probe_table)
        .chain(&config.ranking)
        .collect();
    if listed.is_empty() {
        return Err(ExperimentError::Config(
            "the report lists no input files".into(),
        ));
    }
    let missing: Vec<String> = listed
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ExperimentError::Data(format!(
            "missing report inputs: {}",
            missing.join(", ")
        )));
    }
    let logs = config
        .training_logs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            TrainingLog::from_csv(&text)
                .map_err(|e| ExperimentError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let probe: Option<Vec<ProbeRow>> = config
        .probe_table
        .as_deref()
        .map(read_csv_rows)
        .transpose()?;
    let ranking: Option<Vec<RankedFeature>> =
        config.ranking.as_deref().map(read_csv_rows).transpose()?;
    emit_figures(
        FigureInputs {
            logs: (!logs.is_empty()).then_some(logs.as_slice()),
            probe: probe.as_deref(),
            ranking: ranking.as_deref(),
        },
        &config.output_dir,
        "",
    )
}
