//! On-disk case layout, validated in-memory case records and the receptor to
//! subtype mapping.
//!
//! ```text
//! <root>/labels.csv                       case_id,er,pr,her2 (pos|neg|unknown)
//! <root>/cases/<case_id>/series.json      {"shape":[S,R,C],"pixel_spacing":[row_mm,col_mm]}
//! <root>/cases/<case_id>/{pre,post1,post2,post3}.f32   little-endian f32, slice-major
//! <root>/cases/<case_id>/annotation.json  {"boxes":[{"slice":..,"row_min":..,...}]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEQUENCES: [&str; 4] = ["pre", "post1", "post2", "post3"];
pub const MAX_BOXES: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("case {case_id}: missing sequence `{sequence}`")]
    MissingSequence { case_id: String, sequence: String },
    #[error("case {case_id}: {msg}")]
    Validation { case_id: String, msg: String },
    #[error("case {case_id}: excluded by label rule ({receptors})")]
    Excluded {
        case_id: String,
        receptors: ReceptorStatus,
    },
    #[error("label rule has no row for receptor combination {0}")]
    RuleGap(ReceptorStatus),
    #[error("invalid annotation: {0}")]
    Annotation(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Receptor {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    Unknown,
}

impl Receptor {
    pub const ALL: [Receptor; 3] = [Receptor::Positive, Receptor::Negative, Receptor::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Receptor::Positive => "pos",
            Receptor::Negative => "neg",
            Receptor::Unknown => "unknown",
        }
    }
}

impl FromStr for Receptor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "pos" => Ok(Receptor::Positive),
            "neg" => Ok(Receptor::Negative),
            "unknown" => Ok(Receptor::Unknown),
            other => Err(format!(
                "unknown receptor value `{other}` (expected pos|neg|unknown)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReceptorStatus {
    pub er: Receptor,
    pub pr: Receptor,
    pub her2: Receptor,
}

impl ReceptorStatus {
    pub fn new(er: Receptor, pr: Receptor, her2: Receptor) -> Self {
        Self { er, pr, her2 }
    }

    /// All 27 ternary combinations in a fixed order.
    pub fn all() -> impl Iterator<Item = ReceptorStatus> {
        Receptor::ALL.into_iter().flat_map(|er| {
            Receptor::ALL.into_iter().flat_map(move |pr| {
                Receptor::ALL
                    .into_iter()
                    .map(move |her2| ReceptorStatus { er, pr, her2 })
            })
        })
    }

    pub fn has_unknown(&self) -> bool {
        [self.er, self.pr, self.her2].contains(&Receptor::Unknown)
    }
}

impl fmt::Display for ReceptorStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "er={} pr={} her2={}",
            self.er.as_str(),
            self.pr.as_str(),
            self.her2.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtypeLabel {
    LuminalA,
    Other,
}

impl SubtypeLabel {
    /// Luminal A is the positive class throughout the pipeline.
    pub fn is_positive(self) -> bool {
        self == SubtypeLabel::LuminalA
    }

    pub fn class_index(self) -> usize {
        self.is_positive() as usize
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            SubtypeLabel::LuminalA
        } else {
            SubtypeLabel::Other
        }
    }
}

/// Outcome of a label rule row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDecision {
    Label(SubtypeLabel),
    Exclude,
}

impl FromStr for LabelDecision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "luminal_a" => Ok(LabelDecision::Label(SubtypeLabel::LuminalA)),
            "other" => Ok(LabelDecision::Label(SubtypeLabel::Other)),
            "exclude" => Ok(LabelDecision::Exclude),
            other => Err(format!("unknown rule outcome `{other}`")),
        }
    }
}

impl fmt::Display for LabelDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelDecision::Label(SubtypeLabel::LuminalA) => "luminal_a",
            LabelDecision::Label(SubtypeLabel::Other) => "other",
            LabelDecision::Exclude => "exclude",
        })
    }
}

/// Replaceable receptor-status to subtype table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRule {
    rows: HashMap<ReceptorStatus, LabelDecision>,
}

impl Default for LabelRule {
    /// Luminal A iff (ER+ or PR+) and HER2-; any other fully known combination
    /// is `other`; anything with an unknown receptor is excluded.
    fn default() -> Self {
        let rows = ReceptorStatus::all()
            .map(|r| {
                let decision = if r.has_unknown() {
                    LabelDecision::Exclude
                } else if (r.er == Receptor::Positive || r.pr == Receptor::Positive)
                    && r.her2 == Receptor::Negative
                {
                    LabelDecision::Label(SubtypeLabel::LuminalA)
                } else {
                    LabelDecision::Label(SubtypeLabel::Other)
                };
                (r, decision)
            })
            .collect();
        Self { rows }
    }
}

impl LabelRule {
    pub fn from_rows(rows: impl IntoIterator<Item = (ReceptorStatus, LabelDecision)>) -> Self {
        Self {
            rows: rows.into_iter().collect(),
        }
    }

    pub fn get(&self, receptors: &ReceptorStatus) -> Option<LabelDecision> {
        self.rows.get(receptors).copied()
    }

    pub fn remove(&mut self, receptors: &ReceptorStatus) -> Option<LabelDecision> {
        self.rows.remove(receptors)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads a rule table from CSV with header `er,pr,her2,outcome`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut rows = HashMap::new();
        for (line, record) in reader.records().enumerate() {
            let parse = |msg: String| DatasetError::Parse {
                path: path.to_path_buf(),
                msg: format!("row {}: {msg}", line + 1),
            };
            let record = record.map_err(|e| parse(e.to_string()))?;
            if record.len() != 4 {
                return Err(parse(format!("expected 4 fields, found {}", record.len())));
            }
            let status = ReceptorStatus::new(
                record[0].parse().map_err(parse)?,
                record[1].parse().map_err(parse)?,
                record[2].parse().map_err(parse)?,
            );
            let decision: LabelDecision = record[3].parse().map_err(parse)?;
            rows.insert(status, decision);
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("er,pr,her2,outcome\n");
        for status in ReceptorStatus::all() {
            if let Some(d) = self.rows.get(&status) {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    status.er.as_str(),
                    status.pr.as_str(),
                    status.her2.as_str(),
                    d
                ));
            }
        }
        out
    }
}

/// Looks up the subtype decision for a receptor combination.
pub fn map_receptors_to_label(
    receptors: ReceptorStatus,
    rule: &LabelRule,
) -> Result<LabelDecision> {
    rule.get(&receptors).ok_or(DatasetError::RuleGap(receptors))
}

/// Axis-aligned lesion box on one slice. Bounds are inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    #[serde(rename = "slice")]
    pub slice_index: usize,
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn new(
        slice_index: usize,
        row_min: usize,
        col_min: usize,
        row_max: usize,
        col_max: usize,
    ) -> Self {
        Self {
            slice_index,
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    /// Midpoint of the inclusive bounds, rounded down.
    pub fn center(&self) -> (usize, usize) {
        (
            (self.row_min + self.row_max) / 2,
            (self.col_min + self.col_max) / 2,
        )
    }

    /// In-plane overlap, ignoring slice index.
    pub fn overlaps_in_plane(&self, other: &BoundingBox) -> bool {
        self.row_min <= other.row_max
            && other.row_min <= self.row_max
            && self.col_min <= other.col_max
            && other.col_min <= self.col_max
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> std::result::Result<(), String> {
        let (slices, rows, cols) = dims;
        if self.row_min > self.row_max || self.col_min > self.col_max {
            return Err(format!("box {self:?} has inverted bounds"));
        }
        if self.slice_index >= slices || self.row_max >= rows || self.col_max >= cols {
            return Err(format!(
                "box {self:?} exceeds volume dims {slices}x{rows}x{cols}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub boxes: Vec<BoundingBox>,
}

impl LesionAnnotation {
    pub fn new(boxes: Vec<BoundingBox>) -> Result<Self> {
        let a = Self { boxes };
        a.check_count()?;
        Ok(a)
    }

    fn check_count(&self) -> Result<()> {
        if self.boxes.is_empty() || self.boxes.len() > MAX_BOXES {
            return Err(DatasetError::Annotation(format!(
                "expected 1..={MAX_BOXES} boxes, found {}",
                self.boxes.len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        self.check_count()?;
        for b in &self.boxes {
            b.validate(dims).map_err(DatasetError::Annotation)?;
        }
        Ok(())
    }

    /// The box treated as "the lesion": largest area, first wins ties.
    pub fn primary_box(&self) -> &BoundingBox {
        let mut best = &self.boxes[0];
        for b in &self.boxes[1..] {
            if b.area() > best.area() {
                best = b;
            }
        }
        best
    }

    /// Largest box on a given slice, first wins ties.
    pub fn largest_box_on_slice(&self, slice: usize) -> Option<&BoundingBox> {
        let mut best: Option<&BoundingBox> = None;
        for b in self.boxes.iter().filter(|b| b.slice_index == slice) {
            if best.is_none_or(|cur| b.area() > cur.area()) {
                best = Some(b);
            }
        }
        best
    }
}

/// Binary 3-D mask, slice-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    pub dims: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl Mask3 {
    pub fn get(&self, s: usize, r: usize, c: usize) -> u8 {
        let (_, rows, cols) = self.dims;
        self.data[(s * rows + r) * cols + c]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn slice_areas(&self) -> Vec<usize> {
        let (slices, rows, cols) = self.dims;
        (0..slices)
            .map(|s| {
                self.data[s * rows * cols..(s + 1) * rows * cols]
                    .iter()
                    .filter(|&&v| v == 1)
                    .count()
            })
            .collect()
    }
}

/// Rasterizes the annotation boxes (inclusive bounds) into a binary mask.
pub fn boxes_to_mask(annotation: &LesionAnnotation, dims: (usize, usize, usize)) -> Result<Mask3> {
    for b in &annotation.boxes {
        b.validate(dims).map_err(DatasetError::Annotation)?;
    }
    let (slices, rows, cols) = dims;
    let mut data = vec![0u8; slices * rows * cols];
    for b in &annotation.boxes {
        for r in b.row_min..=b.row_max {
            let start = (b.slice_index * rows + r) * cols;
            data[start + b.col_min..=start + b.col_max].fill(1);
        }
    }
    Ok(Mask3 { dims, data })
}

/// Real-valued volume stored slice-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Self {
        assert_eq!(dims.0 * dims.1 * dims.2, data.len(), "volume data length");
        Self { dims, data }
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self::new(dims, vec![0.0; dims.0 * dims.1 * dims.2])
    }

    pub fn slices(&self) -> usize {
        self.dims.0
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let n = self.dims.1 * self.dims.2;
        &self.data[s * n..(s + 1) * n]
    }

    pub fn slice_mut(&mut self, s: usize) -> &mut [f32] {
        let n = self.dims.1 * self.dims.2;
        &mut self.data[s * n..(s + 1) * n]
    }

    pub fn get(&self, s: usize, r: usize, c: usize) -> f32 {
        self.data[(s * self.dims.1 + r) * self.dims.2 + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    pub pre: Volume,
    pub post1: Volume,
    pub post2: Volume,
    pub post3: Volume,
    /// (row_mm, col_mm)
    pub pixel_spacing: (f64, f64),
}

impl VolumeSeries {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.pre.dims
    }

    pub fn slice_count(&self) -> usize {
        self.pre.dims.0
    }

    pub fn posts(&self) -> [&Volume; 3] {
        [&self.post1, &self.post2, &self.post3]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let (r, c) = self.pixel_spacing;
        if !(r > 0.0 && c > 0.0 && r.is_finite() && c.is_finite()) {
            return Err(format!("pixel spacing must be positive, got ({r}, {c})"));
        }
        for (name, v) in SEQUENCES
            .iter()
            .zip([&self.pre, &self.post1, &self.post2, &self.post3])
        {
            if v.dims != self.pre.dims {
                return Err(format!(
                    "sequence `{name}` has shape {:?}, pre has {:?}",
                    v.dims, self.pre.dims
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub receptors: ReceptorStatus,
    pub label: SubtypeLabel,
    pub series: VolumeSeries,
    pub annotation: LesionAnnotation,
}

#[derive(Debug)]
pub struct SkippedCase {
    pub case_id: String,
    pub reason: DatasetError,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub cases: Vec<CaseRecord>,
    pub skipped: Vec<SkippedCase>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesHeader {
    shape: [usize; 3],
    pixel_spacing: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    boxes: Vec<BoundingBox>,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, ReceptorStatus>> {
    let parse = |msg: String| DatasetError::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => parse(format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| parse(e.to_string()))?.clone();
    let expected = ["case_id", "er", "pr", "her2"];
    if headers.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(parse(format!(
            "expected header `case_id,er,pr,her2`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse(e.to_string()))?;
        if record.len() != 4 {
            return Err(parse(format!("row {}: expected 4 fields", i + 1)));
        }
        let row_err = |m: String| parse(format!("row {}: {m}", i + 1));
        let status = ReceptorStatus::new(
            record[1].parse().map_err(row_err)?,
            record[2].parse().map_err(row_err)?,
            record[3].parse().map_err(row_err)?,
        );
        let id = record[0].trim().to_string();
        if out.insert(id.clone(), status).is_some() {
            return Err(parse(format!("duplicate case_id `{id}`")));
        }
    }
    Ok(out)
}

fn read_volume(
    path: &Path,
    case_id: &str,
    sequence: &str,
    dims: (usize, usize, usize),
) -> Result<Volume> {
    if !path.exists() {
        return Err(DatasetError::MissingSequence {
            case_id: case_id.to_string(),
            sequence: sequence.to_string(),
        });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::Parse {
            path: path.to_path_buf(),
            msg: format!("byte length {} is not a multiple of 4", bytes.len()),
        });
    }
    let n = bytes.len() / 4;
    let plane = dims.1 * dims.2;
    let expected = dims.0 * plane;
    if n != expected {
        let detail = if plane > 0 && n % plane == 0 {
            format!("{} slices, header declares {}", n / plane, dims.0)
        } else {
            format!("{n} values, header declares {expected}")
        };
        return Err(DatasetError::Validation {
            case_id: case_id.to_string(),
            msg: format!("shape mismatch: `{sequence}` has {detail}"),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(dims, data))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads one case directory. The label decision comes from `receptors` and `rule`.
pub fn load_case(
    case_dir: &Path,
    case_id: &str,
    receptors: ReceptorStatus,
    rule: &LabelRule,
) -> Result<CaseRecord> {
    let label = match map_receptors_to_label(receptors, rule)? {
        LabelDecision::Label(l) => l,
        LabelDecision::Exclude => {
            return Err(DatasetError::Excluded {
                case_id: case_id.to_string(),
                receptors,
            })
        }
    };
    let header: SeriesHeader = read_json(&case_dir.join("series.json"))?;
    let [s, r, c] = header.shape;
    if s == 0 || r == 0 || c == 0 {
        return Err(DatasetError::Parse {
            path: case_dir.join("series.json"),
            msg: format!("shape must be positive, got {:?}", header.shape),
        });
    }
    let dims = (s, r, c);
    let mut volumes = Vec::with_capacity(4);
    for seq in SEQUENCES {
        volumes.push(read_volume(
            &case_dir.join(format!("{seq}.f32")),
            case_id,
            seq,
            dims,
        )?);
    }
    let post3 = volumes.pop().unwrap();
    let post2 = volumes.pop().unwrap();
    let post1 = volumes.pop().unwrap();
    let pre = volumes.pop().unwrap();
    let series = VolumeSeries {
        pre,
        post1,
        post2,
        post3,
        pixel_spacing: (header.pixel_spacing[0], header.pixel_spacing[1]),
    };
    series.validate().map_err(|msg| DatasetError::Validation {
        case_id: case_id.to_string(),
        msg,
    })?;
    let ann: AnnotationFile = read_json(&case_dir.join("annotation.json"))?;
    let annotation = LesionAnnotation { boxes: ann.boxes };
    annotation
        .validate(dims)
        .map_err(|e| DatasetError::Validation {
            case_id: case_id.to_string(),
            msg: e.to_string(),
        })?;
    Ok(CaseRecord {
        case_id: case_id.to_string(),
        receptors,
        label,
        series,
        annotation,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with_rule(root, &LabelRule::default())
}

/// Loads every case under `root/cases`, in lexicographic case_id order.
///
/// Cases that fail validation are skipped with a logged reason; only a missing
/// or malformed `labels.csv` is fatal.
pub fn load_dataset_with_rule(root: &Path, rule: &LabelRule) -> Result<Dataset> {
    let cases_dir = root.join("cases");
    let mut ids: Vec<String> = Vec::new();
    if cases_dir.exists() {
        for entry in fs::read_dir(&cases_dir).map_err(io_err(&cases_dir))? {
            let entry = entry.map_err(io_err(&cases_dir))?;
            if entry.file_type().map_err(io_err(&entry.path()))?.is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    let mut dataset = Dataset::default();
    if ids.is_empty() {
        return Ok(dataset);
    }
    let labels = read_labels(&root.join("labels.csv"))?;
    for id in ids {
        let outcome = match labels.get(&id) {
            Some(&receptors) => load_case(&cases_dir.join(&id), &id, receptors, rule),
            None => Err(DatasetError::Validation {
                case_id: id.clone(),
                msg: "no row in labels.csv".into(),
            }),
        };
        match outcome {
            Ok(case) => dataset.cases.push(case),
            Err(reason) => {
                warn!("skipping case {id}: {reason}");
                dataset.skipped.push(SkippedCase {
                    case_id: id,
                    reason,
                });
            }
        }
    }
    Ok(dataset)
}

fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes one case directory in the on-disk layout (labels are written separately).
pub fn write_case(root: &Path, case: &CaseRecord) -> Result<()> {
    let dir = root.join("cases").join(&case.case_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (s, r, c) = case.series.dims();
    let header = SeriesHeader {
        shape: [s, r, c],
        pixel_spacing: [case.series.pixel_spacing.0, case.series.pixel_spacing.1],
    };
    let header_path = dir.join("series.json");
    fs::write(&header_path, serde_json::to_string(&header).unwrap())
        .map_err(io_err(&header_path))?;
    for (seq, v) in SEQUENCES.iter().zip([
        &case.series.pre,
        &case.series.post1,
        &case.series.post2,
        &case.series.post3,
    ]) {
        write_volume(&dir.join(format!("{seq}.f32")), v)?;
    }
    let ann_path = dir.join("annotation.json");
    let ann = AnnotationFile {
        boxes: case.annotation.boxes.clone(),
    };
    fs::write(&ann_path, serde_json::to_string(&ann).unwrap()).map_err(io_err(&ann_path))
}

pub fn write_labels<'a>(
    root: &Path,
    rows: impl IntoIterator<Item = (&'a str, ReceptorStatus)>,
) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut out = String::from("case_id,er,pr,her2\n");
    for (id, r) in rows {
        out.push_str(&format!(
            "{id},{},{},{}\n",
            r.er.as_str(),
            r.pr.as_str(),
            r.her2.as_str()
        ));
    }
    let path = root.join("labels.csv");
    fs::write(&path, out).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Receptor::*;

    #[test]
    fn default_rule_maps_hormone_positive_her2_negative_to_luminal_a() {
        let rule = LabelRule::default();
        assert_eq!(
            map_receptors_to_label(ReceptorStatus::new(Positive, Positive, Negative), &rule)
                .unwrap(),
            LabelDecision::Label(SubtypeLabel::LuminalA)
        );
        assert_eq!(
            map_receptors_to_label(ReceptorStatus::new(Negative, Negative, Negative), &rule)
                .unwrap(),
            LabelDecision::Label(SubtypeLabel::Other)
        );
        assert_eq!(
            map_receptors_to_label(ReceptorStatus::new(Positive, Negative, Positive), &rule)
                .unwrap(),
            LabelDecision::Label(SubtypeLabel::Other)
        );
    }

    #[test]
    fn default_rule_is_total_and_excludes_unknowns() {
        let rule = LabelRule::default();
        assert_eq!(rule.len(), 27);
        for status in ReceptorStatus::all() {
            let d = map_receptors_to_label(status, &rule).unwrap();
            assert_eq!(
                d == LabelDecision::Exclude,
                status.has_unknown(),
                "{status}"
            );
        }
    }

    #[test]
    fn rule_gap_is_a_configuration_error() {
        let mut rule = LabelRule::default();
        let all_unknown = ReceptorStatus::new(Unknown, Unknown, Unknown);
        rule.remove(&all_unknown);
        assert!(matches!(
            map_receptors_to_label(all_unknown, &rule),
            Err(DatasetError::RuleGap(_))
        ));
    }

    #[test]
    fn rule_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rule.csv");
        fs::write(&path, LabelRule::default().to_csv()).unwrap();
        assert_eq!(LabelRule::from_csv(&path).unwrap(), LabelRule::default());
    }

    #[test]
    fn full_slice_box_fills_only_that_slice() {
        let ann = LesionAnnotation::new(vec![BoundingBox::new(1, 0, 0, 3, 4)]).unwrap();
        let mask = boxes_to_mask(&ann, (3, 4, 5)).unwrap();
        assert_eq!(mask.slice_areas(), vec![0, 20, 0]);
    }

    #[test]
    fn inclusive_box_covers_three_by_three() {
        let ann = LesionAnnotation::new(vec![BoundingBox::new(0, 2, 2, 4, 4)]).unwrap();
        let mask = boxes_to_mask(&ann, (1, 6, 6)).unwrap();
        assert_eq!(mask.count_ones(), 9);
        assert_eq!(mask.get(0, 2, 2), 1);
        assert_eq!(mask.get(0, 4, 4), 1);
        assert_eq!(mask.get(0, 5, 4), 0);
    }

    #[test]
    fn box_outside_dims_is_rejected() {
        let ann = LesionAnnotation::new(vec![BoundingBox::new(0, 2, 2, 6, 4)]).unwrap();
        assert!(boxes_to_mask(&ann, (1, 6, 6)).is_err());
        let ann = LesionAnnotation::new(vec![BoundingBox::new(2, 0, 0, 1, 1)]).unwrap();
        assert!(boxes_to_mask(&ann, (2, 6, 6)).is_err());
    }

    #[test]
    fn annotation_box_count_is_bounded() {
        assert!(LesionAnnotation::new(vec![]).is_err());
        let b = BoundingBox::new(0, 0, 0, 1, 1);
        assert!(LesionAnnotation::new(vec![b; 6]).is_err());
        assert!(LesionAnnotation::new(vec![b; 5]).is_ok());
    }

    fn arb_box(dims: (usize, usize, usize)) -> impl Strategy<Value = BoundingBox> {
        (0..dims.0, 0..dims.1, 0..dims.1, 0..dims.2, 0..dims.2).prop_map(|(s, r0, r1, c0, c1)| {
            BoundingBox::new(s, r0.min(r1), c0.min(c1), r0.max(r1), c0.max(c1))
        })
    }

    proptest! {
        #[test]
        fn mask_equals_brute_force_union(boxes in prop::collection::vec(arb_box((3, 7, 6)), 1..=5)) {
            let dims = (3, 7, 6);
            let ann = LesionAnnotation::new(boxes.clone()).unwrap();
            let mask = boxes_to_mask(&ann, dims).unwrap();
            let mut expected = 0;
            let mut area_sum = 0;
            for b in &boxes {
                area_sum += b.area();
            }
            for s in 0..dims.0 {
                for r in 0..dims.1 {
                    for c in 0..dims.2 {
                        let inside = boxes.iter().any(|b| b.slice_index == s
                            && (b.row_min..=b.row_max).contains(&r)
                            && (b.col_min..=b.col_max).contains(&c));
                        prop_assert_eq!(mask.get(s, r, c), inside as u8);
                        expected += inside as usize;
                    }
                }
            }
            prop_assert!(mask.data.iter().all(|&v| v <= 1));
            prop_assert_eq!(mask.count_ones(), expected);
            prop_assert!(expected <= area_sum);
        }
    }
}
