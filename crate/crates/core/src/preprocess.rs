//! Resolution harmonization, subtraction channels and lesion patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BoundingBox, CaseRecord, LesionAnnotation, Volume, VolumeSeries};
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("spacing histogram is empty")]
    EmptyCollection,
    #[error("pixel spacing must be positive, got {0:?}")]
    BadSpacing((f64, f64)),
    #[error("slice {index} out of range for a volume with {slices} slices")]
    SliceOutOfRange { index: usize, slices: usize },
    #[error("patch size must be at least 1")]
    BadPatchSize,
    #[error("invalid augmentation spec: {0}")]
    BadAugmentation(String),
    #[error("patch cache io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("patch cache parse error at {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Case counts per in-plane pixel spacing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpacingHistogram {
    entries: Vec<((f64, f64), usize)>,
}

impl SpacingHistogram {
    pub fn from_spacings(spacings: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut h = Self::default();
        for s in spacings {
            h.add(s, 1);
        }
        h
    }

    pub fn add(&mut self, spacing: (f64, f64), count: usize) {
        if count == 0 {
            return;
        }
        match self.entries.iter_mut().find(|(k, _)| *k == spacing) {
            Some((_, n)) => *n += count,
            None => self.entries.push((spacing, count)),
        }
    }

    pub fn entries(&self) -> &[((f64, f64), usize)] {
        &self.entries
    }

    /// Most frequent spacing; ties go to the smallest row spacing, then the smallest column spacing.
    pub fn mode(&self) -> Option<(f64, f64)> {
        self.entries
            .iter()
            .max_by(|(a, na), (b, nb)| {
                na.cmp(nb)
                    .then_with(|| b.0.total_cmp(&a.0))
                    .then_with(|| b.1.total_cmp(&a.1))
            })
            .map(|(k, _)| *k)
    }
}

pub fn modal_spacing(cases: &[CaseRecord]) -> Result<(f64, f64)> {
    SpacingHistogram::from_spacings(cases.iter().map(|c| c.series.pixel_spacing))
        .mode()
        .ok_or(PreprocessError::EmptyCollection)
}

fn check_spacing(s: (f64, f64)) -> Result<()> {
    if s.0 > 0.0 && s.1 > 0.0 && s.0.is_finite() && s.1.is_finite() {
        Ok(())
    } else {
        Err(PreprocessError::BadSpacing(s))
    }
}

/// In-plane output size after rescaling from `current` to `target` spacing.
pub fn resampled_dims(
    rows: usize,
    cols: usize,
    current: (f64, f64),
    target: (f64, f64),
) -> (usize, usize) {
    let r = ((rows as f64) * current.0 / target.0).round().max(1.0) as usize;
    let c = ((cols as f64) * current.1 / target.1).round().max(1.0) as usize;
    (r, c)
}

/// Source coordinate for an output index: `(out + 0.5) * scale - 0.5`, clamped to the
/// valid range (aligned-corners-off convention).
fn source_coord(out: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let x = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, x - i0 as f64)
}

/// Bilinear rescale of one 2-D plane to `out_rows x out_cols`, with `scale` giving
/// input pixels per output pixel along each axis.
pub fn resample_plane(
    src: &[f32],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
    scale: (f64, f64),
) -> Vec<f32> {
    let col_taps: Vec<_> = (0..out_cols)
        .map(|c| source_coord(c, scale.1, cols))
        .collect();
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let (r0, r1, fr) = source_coord(r, scale.0, rows);
        let row0 = &src[r0 * cols..(r0 + 1) * cols];
        let row1 = &src[r1 * cols..(r1 + 1) * cols];
        for &(c0, c1, fc) in &col_taps {
            let top = row0[c0] as f64 * (1.0 - fc) + row0[c1] as f64 * fc;
            let bottom = row1[c0] as f64 * (1.0 - fc) + row1[c1] as f64 * fc;
            out.push((top * (1.0 - fr) + bottom * fr) as f32);
        }
    }
    out
}

/// Rescales every slice in-plane from `current` to `target` spacing. Slices are
/// never resampled along the slice axis.
pub fn resample_bilinear(
    volume: &Volume,
    current: (f64, f64),
    target: (f64, f64),
) -> Result<Volume> {
    check_spacing(current)?;
    check_spacing(target)?;
    if current == target {
        return Ok(volume.clone());
    }
    let (slices, rows, cols) = volume.dims;
    let (out_rows, out_cols) = resampled_dims(rows, cols, current, target);
    let scale = (target.0 / current.0, target.1 / current.1);
    let mut data = Vec::with_capacity(slices * out_rows * out_cols);
    for s in 0..slices {
        data.extend(resample_plane(
            volume.slice(s),
            rows,
            cols,
            out_rows,
            out_cols,
            scale,
        ));
    }
    Ok(Volume::new((slices, out_rows, out_cols), data))
}

/// Maps inclusive box bounds onto the resampled pixel grid.
pub fn rescale_box(
    b: &BoundingBox,
    current: (f64, f64),
    target: (f64, f64),
    out_rows: usize,
    out_cols: usize,
) -> BoundingBox {
    let map = |v: usize, ratio: f64, len: usize| -> usize {
        (((v as f64 + 0.5) * ratio - 0.5).round().max(0.0) as usize).min(len - 1)
    };
    let rr = current.0 / target.0;
    let rc = current.1 / target.1;
    BoundingBox::new(
        b.slice_index,
        map(b.row_min, rr, out_rows),
        map(b.col_min, rc, out_cols),
        map(b.row_max, rr, out_rows),
        map(b.col_max, rc, out_cols),
    )
}

/// Brings a case to the target in-plane spacing (volumes and annotation).
pub fn harmonize_case(case: &CaseRecord, target: (f64, f64)) -> Result<CaseRecord> {
    let current = case.series.pixel_spacing;
    check_spacing(current)?;
    check_spacing(target)?;
    if current == target {
        return Ok(case.clone());
    }
    let s = &case.series;
    let series = VolumeSeries {
        pre: resample_bilinear(&s.pre, current, target)?,
        post1: resample_bilinear(&s.post1, current, target)?,
        post2: resample_bilinear(&s.post2, current, target)?,
        post3: resample_bilinear(&s.post3, current, target)?,
        pixel_spacing: target,
    };
    let (_, rows, cols) = series.dims();
    let boxes = case
        .annotation
        .boxes
        .iter()
        .map(|b| rescale_box(b, current, target, rows, cols))
        .collect();
    Ok(CaseRecord {
        series,
        annotation: LesionAnnotation { boxes },
        ..case.clone()
    })
}

/// Three-channel subtraction image, stored rows x cols x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
    pub slice_index: usize,
    pub case_id: String,
}

impl ChannelImage {
    pub fn get(&self, r: usize, c: usize, k: usize) -> f32 {
        self.pixels[(r * self.cols + c) * 3 + k]
    }
}

/// Channel k = post_k - pre on one slice.
pub fn build_subtraction_channels(
    series: &VolumeSeries,
    slice_index: usize,
) -> Result<ChannelImage> {
    let slices = series.slice_count();
    if slice_index >= slices {
        return Err(PreprocessError::SliceOutOfRange {
            index: slice_index,
            slices,
        });
    }
    let (_, rows, cols) = series.dims();
    let pre = series.pre.slice(slice_index);
    let posts = series.posts().map(|v| v.slice(slice_index));
    let mut pixels = Vec::with_capacity(rows * cols * 3);
    for i in 0..rows * cols {
        for post in &posts {
            pixels.push(post[i] - pre[i]);
        }
    }
    Ok(ChannelImage {
        rows,
        cols,
        pixels,
        slice_index,
        case_id: String::new(),
    })
}

pub fn case_channel_image(case: &CaseRecord, slice_index: usize) -> Result<ChannelImage> {
    let mut img = build_subtraction_channels(&case.series, slice_index)?;
    img.case_id = case.case_id.clone();
    Ok(img)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of(images: &[&ChannelImage]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.pixels.chunks_exact(3) {
                for k in 0..3 {
                    sum[k] += px[k] as f64;
                }
            }
            n += img.rows * img.cols;
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|s| s / n);
        for img in images {
            for px in img.pixels.chunks_exact(3) {
                for k in 0..3 {
                    let d = px[k] as f64 - mean[k];
                    sq[k] += d * d;
                }
            }
        }
        let std = sq.map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, image: &mut ChannelImage) {
        for px in image.pixels.chunks_exact_mut(3) {
            for k in 0..3 {
                px[k] = ((px[k] as f64 - self.mean[k]) / self.std[k]) as f32;
            }
        }
    }
}

/// Integer translation of the patch center plus a rotation (degrees) about it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform {
    pub d_row: i64,
    pub d_col: i64,
    pub angle_deg: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        d_row: 0,
        d_col: 0,
        angle_deg: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Square lesion crop, stored p x p x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub case_id: String,
    pub slice_index: usize,
    pub center: (i64, i64),
    pub transform: Transform,
}

impl Patch {
    pub fn get(&self, r: usize, c: usize, k: usize) -> f32 {
        self.pixels[(r * self.size + c) * 3 + k]
    }
}

fn bilinear_zero(image: &ChannelImage, r: f64, c: f64, out: &mut [f32]) {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let fetch = |rr: i64, cc: i64, k: usize| -> f64 {
        if rr < 0 || cc < 0 || rr >= image.rows as i64 || cc >= image.cols as i64 {
            0.0
        } else {
            image.get(rr as usize, cc as usize, k) as f64
        }
    };
    for (k, o) in out.iter_mut().enumerate() {
        *o = if fr == 0.0 && fc == 0.0 {
            fetch(r0, c0, k) as f32
        } else {
            let top = fetch(r0, c0, k) * (1.0 - fc) + fetch(r0, c0 + 1, k) * fc;
            let bottom = fetch(r0 + 1, c0, k) * (1.0 - fc) + fetch(r0 + 1, c0 + 1, k) * fc;
            (top * (1.0 - fr) + bottom * fr) as f32
        };
    }
}

/// Crops a `p x p` patch spanning rows `[r - p/2, r - p/2 + p)` (same for
/// columns). Pixels outside the image are zero.
pub fn extract_center_patch(image: &ChannelImage, center: (i64, i64), p: usize) -> Result<Patch> {
    apply_transform(image, center, p, Transform::IDENTITY)
}

/// Re-creates a patch from its recorded base center and transform: the center is
/// shifted by `(d_row, d_col)`, then the image is rotated about the shifted center
/// (bilinear, zero fill) before cropping.
pub fn apply_transform(
    image: &ChannelImage,
    center: (i64, i64),
    p: usize,
    transform: Transform,
) -> Result<Patch> {
    if p == 0 {
        return Err(PreprocessError::BadPatchSize);
    }
    let half = (p / 2) as i64;
    let cr = center.0 + transform.d_row;
    let cc = center.1 + transform.d_col;
    let mut pixels = vec![0.0f32; p * p * 3];
    if transform.angle_deg == 0.0 {
        for i in 0..p {
            let r = cr - half + i as i64;
            if r < 0 || r >= image.rows as i64 {
                continue;
            }
            for j in 0..p {
                let c = cc - half + j as i64;
                if c < 0 || c >= image.cols as i64 {
                    continue;
                }
                let src = (r as usize * image.cols + c as usize) * 3;
                pixels[(i * p + j) * 3..(i * p + j) * 3 + 3]
                    .copy_from_slice(&image.pixels[src..src + 3]);
            }
        }
    } else {
        let (sin, cos) = transform.angle_deg.to_radians().sin_cos();
        for i in 0..p {
            let dr = (i as i64 - half) as f64;
            for j in 0..p {
                let dc = (j as i64 - half) as f64;
                let sr = cr as f64 + cos * dr - sin * dc;
                let sc = cc as f64 + sin * dr + cos * dc;
                bilinear_zero(
                    image,
                    sr,
                    sc,
                    &mut pixels[(i * p + j) * 3..(i * p + j) * 3 + 3],
                );
            }
        }
    }
    Ok(Patch {
        pixels,
        size: p,
        case_id: image.case_id.clone(),
        slice_index: image.slice_index,
        center,
        transform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub n_extra: usize,
    pub max_translation_px: i64,
    pub max_rotation_deg: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            n_extra: 4,
            max_translation_px: 8,
            max_rotation_deg: 20.0,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_translation_px < 0
            || !(self.max_rotation_deg >= 0.0)
            || !self.max_rotation_deg.is_finite()
        {
            return Err(PreprocessError::BadAugmentation(format!(
                "bounds must be non-negative, got translation {} rotation {}",
                self.max_translation_px, self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// Base patch followed by `n_extra` randomly translated and rotated patches.
/// The random stream is keyed by `(spec.seed, case_id, slice_index)`.
pub fn augment_patch(
    image: &ChannelImage,
    center: (i64, i64),
    p: usize,
    spec: &AugmentationSpec,
) -> Result<Vec<Patch>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(1 + spec.n_extra);
    out.push(extract_center_patch(image, center, p)?);
    let mut rng = rng_for(spec.seed, &image.case_id, image.slice_index as u64);
    let t = spec.max_translation_px;
    for _ in 0..spec.n_extra {
        let d_row = rng.gen_range(-t..=t);
        let d_col = rng.gen_range(-t..=t);
        let u: f64 = rng.gen();
        let transform = Transform {
            d_row,
            d_col,
            angle_deg: (2.0 * u - 1.0) * spec.max_rotation_deg,
        };
        out.push(apply_transform(image, center, p, transform)?);
    }
    Ok(out)
}

/// Slices that produce training patches, one box per slice: the largest box is
/// the lesion, and every box overlapping it in-plane marks a slice it spans.
pub fn training_slices(annotation: &LesionAnnotation) -> Vec<BoundingBox> {
    let lesion = annotation.primary_box();
    let mut slices: Vec<usize> = annotation
        .boxes
        .iter()
        .filter(|b| b.overlaps_in_plane(lesion))
        .map(|b| b.slice_index)
        .collect();
    slices.sort_unstable();
    slices.dedup();
    slices
        .into_iter()
        .map(|s| {
            // largest overlapping box on this slice
            *annotation
                .boxes
                .iter()
                .filter(|b| b.slice_index == s && b.overlaps_in_plane(lesion))
                .fold(None::<&BoundingBox>, |best, b| match best {
                    Some(cur) if cur.area() >= b.area() => Some(cur),
                    _ => Some(b),
                })
                .unwrap()
        })
        .collect()
}

/// Standardization statistics over the case's annotated slices.
pub fn lesion_slice_stats(case: &CaseRecord) -> Result<ChannelStats> {
    let mut slices: Vec<usize> = case
        .annotation
        .boxes
        .iter()
        .map(|b| b.slice_index)
        .collect();
    slices.sort_unstable();
    slices.dedup();
    let images = slices
        .iter()
        .map(|&s| case_channel_image(case, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelStats::of(&images.iter().collect::<Vec<_>>()))
}

fn cache_err(path: &Path) -> impl FnOnce(std::io::Error) -> PreprocessError + '_ {
    move |source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes patches to `<workdir>/patches/<p>/<case_id>/<slice>_<k>.f32` with an
/// `index.csv` per patch size. `k` counts patches per (case, slice) in input order.
pub fn write_patch_cache(workdir: &Path, patches: &[Patch]) -> Result<()> {
    use std::collections::HashMap;
    let mut counters: HashMap<(usize, String, usize), usize> = HashMap::new();
    let mut indexes: std::collections::BTreeMap<usize, String> = Default::default();
    for patch in patches {
        let key = (patch.size, patch.case_id.clone(), patch.slice_index);
        let k = counters.entry(key).or_insert(0);
        let dir = workdir
            .join("patches")
            .join(patch.size.to_string())
            .join(&patch.case_id);
        fs::create_dir_all(&dir).map_err(cache_err(&dir))?;
        let path = dir.join(format!("{}_{}.f32", patch.slice_index, k));
        let bytes: Vec<u8> = patch.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(cache_err(&path))?;
        let index = indexes
            .entry(patch.size)
            .or_insert_with(|| "case_id,slice,k,center_row,center_col,d_row,d_col,angle\n".into());
        index.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            patch.case_id,
            patch.slice_index,
            k,
            patch.center.0,
            patch.center.1,
            patch.transform.d_row,
            patch.transform.d_col,
            patch.transform.angle_deg
        ));
        *k += 1;
    }
    for (size, index) in indexes {
        let path = workdir
            .join("patches")
            .join(size.to_string())
            .join("index.csv");
        fs::write(&path, index).map_err(cache_err(&path))?;
    }
    Ok(())
}

pub fn read_patch_cache(workdir: &Path, p: usize) -> Result<Vec<Patch>> {
    let base = workdir.join("patches").join(p.to_string());
    let index_path = base.join("index.csv");
    let parse = |msg: String| PreprocessError::Cache {
        path: index_path.clone(),
        msg,
    };
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| parse(e.to_string()))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| parse(e.to_string()))?;
        if r.len() != 8 {
            return Err(parse(format!("expected 8 fields, found {}", r.len())));
        }
        let num =
            |i: usize| -> Result<i64> { r[i].parse::<i64>().map_err(|e| parse(e.to_string())) };
        let case_id = r[0].to_string();
        let slice = num(1)? as usize;
        let k = num(2)?;
        let center = (num(3)?, num(4)?);
        let transform = Transform {
            d_row: num(5)?,
            d_col: num(6)?,
            angle_deg: r[7]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse(e.to_string()))?,
        };
        let path = base.join(&case_id).join(format!("{slice}_{k}.f32"));
        let bytes = fs::read(&path).map_err(cache_err(&path))?;
        if bytes.len() != p * p * 3 * 4 {
            return Err(PreprocessError::Cache {
                path,
                msg: format!("expected {} bytes", p * p * 12),
            });
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Patch {
            pixels,
            size: p,
            case_id,
            slice_index: slice,
            center,
            transform,
        });
    }
    Ok(out)
}
