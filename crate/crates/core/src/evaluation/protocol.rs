use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::dataset::{boxes_to_mask, BoundingBox, CaseRecord};
use crate::preprocess::{
    augment_patch, case_channel_image, extract_center_patch, lesion_slice_stats, training_slices,
    AugmentationSpec, ChannelImage, Patch,
};

pub const EVAL_SLICES: usize = 5;
pub const EVAL_PATCHES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSelection {
    pub case_id: String,
    pub slice_indices: Vec<usize>,
}

/// Start of the `width`-slice window with the largest summed area (lowest start
/// on ties) and the window length, which is shorter only for short volumes.
pub fn best_window(areas: &[usize], width: usize) -> (usize, usize) {
    let len = width.min(areas.len());
    let mut best = (0, 0usize);
    let mut sum: usize = areas[..len].iter().sum();
    best.1 = sum;
    for start in 1..=areas.len() - len {
        sum = sum + areas[start + len - 1] - areas[start - 1];
        if sum > best.1 {
            best = (start, sum);
        }
    }
    (best.0, len)
}

/// Five consecutive slices with the most lesion-mask pixels.
pub fn select_slices(case: &CaseRecord) -> Result<SliceSelection> {
    let dims = case.series.dims();
    let mask = boxes_to_mask(&case.annotation, dims)
        .map_err(|_| EvalError::NoLesion(case.case_id.clone()))?;
    let areas = mask.slice_areas();
    if areas.iter().all(|&a| a == 0) {
        return Err(EvalError::NoLesion(case.case_id.clone()));
    }
    let (start, len) = best_window(&areas, EVAL_SLICES);
    Ok(SliceSelection {
        case_id: case.case_id.clone(),
        slice_indices: (start..start + len).collect(),
    })
}

/// Exactly five (slice, box) pairs to score. Annotated slices of the window are
/// used in order; when fewer than five exist, the central annotated slice is
/// repeated to fill the remainder. The flag reports whether that happened.
pub fn eval_slices(
    case: &CaseRecord,
    selection: &SliceSelection,
) -> (Vec<(usize, BoundingBox)>, bool) {
    let mut picked: Vec<(usize, BoundingBox)> = selection
        .slice_indices
        .iter()
        .filter_map(|&s| case.annotation.largest_box_on_slice(s).map(|b| (s, *b)))
        .collect();
    let repeated = picked.len() < EVAL_SLICES;
    if repeated {
        let central = picked[(picked.len() - 1) / 2];
        picked.resize(EVAL_SLICES, central);
    }
    (picked, repeated)
}

/// Patches at the four box corners and the box center, in that order.
pub fn sample_eval_patches(
    image: &ChannelImage,
    lesion: &BoundingBox,
    p: usize,
) -> Result<Vec<Patch>> {
    let (cr, cc) = lesion.center();
    let centers = [
        (lesion.row_min, lesion.col_min),
        (lesion.row_min, lesion.col_max),
        (lesion.row_max, lesion.col_min),
        (lesion.row_max, lesion.col_max),
        (cr, cc),
    ];
    centers
        .iter()
        .map(|&(r, c)| Ok(extract_center_patch(image, (r as i64, c as i64), p)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub patch_size: usize,
    pub augmentation: AugmentationSpec,
    /// Per-case channel standardization over lesion slices.
    pub normalize: bool,
}

/// Every patch one case contributes: augmented training patches and the 25
/// evaluation patches.
#[derive(Debug, Clone)]
pub struct CaseSamples {
    pub case_id: String,
    pub label: bool,
    pub train: Vec<Patch>,
    pub eval: Vec<Patch>,
    pub eval_slices_repeated: bool,
}

pub fn build_case_samples(case: &CaseRecord, opts: &SampleOptions) -> Result<CaseSamples> {
    let stats = if opts.normalize {
        Some(lesion_slice_stats(case)?)
    } else {
        None
    };
    let mut images: BTreeMap<usize, ChannelImage> = BTreeMap::new();
    let mut image = |s: usize| -> Result<ChannelImage> {
        if let Some(img) = images.get(&s) {
            return Ok(img.clone());
        }
        let mut img = case_channel_image(case, s)?;
        if let Some(st) = &stats {
            st.apply(&mut img);
        }
        images.insert(s, img.clone());
        Ok(img)
    };
    let mut train = Vec::new();
    for b in training_slices(&case.annotation) {
        let img = image(b.slice_index)?;
        let (r, c) = b.center();
        train.extend(augment_patch(
            &img,
            (r as i64, c as i64),
            opts.patch_size,
            &opts.augmentation,
        )?);
    }
    let selection = select_slices(case)?;
    let (slices, repeated) = eval_slices(case, &selection);
    if repeated {
        debug!(
            "{}: fewer than {EVAL_SLICES} annotated slices in the window, repeating the central one",
            case.case_id
        );
    }
    let mut eval = Vec::with_capacity(EVAL_SLICES * EVAL_PATCHES);
    for (s, b) in slices {
        eval.extend(sample_eval_patches(&image(s)?, &b, opts.patch_size)?);
    }
    Ok(CaseSamples {
        case_id: case.case_id.clone(),
        label: case.label.is_positive(),
        train,
        eval,
        eval_slices_repeated: repeated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        assert_eq!(best_window(&[1, 5, 9, 7, 3, 2], 5), (1, 5));
        assert_eq!(best_window(&[4, 4, 4, 4, 4], 5), (0, 5));
        assert_eq!(best_window(&[3; 8], 5), (0, 5));
        assert_eq!(best_window(&[0, 2, 1], 5), (0, 3));
    }

    fn image(rows: usize, cols: usize) -> ChannelImage {
        ChannelImage {
            rows,
            cols,
            pixels: (0..rows * cols * 3).map(|i| i as f32).collect(),
            slice_index: 0,
            case_id: "c".into(),
        }
    }

    #[test]
    fn eval_patch_centers() {
        let b = BoundingBox::new(0, 10, 10, 30, 50);
        let patches = sample_eval_patches(&image(64, 64), &b, 8).unwrap();
        let centers: Vec<_> = patches.iter().map(|p| p.center).collect();
        assert_eq!(
            centers,
            vec![(10, 10), (10, 50), (30, 10), (30, 50), (20, 30)]
        );
    }

    #[test]
    fn degenerate_box_gives_identical_patches() {
        let b = BoundingBox::new(0, 5, 6, 5, 6);
        let patches = sample_eval_patches(&image(16, 16), &b, 4).unwrap();
        assert!(patches.iter().all(|p| p.pixels == patches[0].pixels));
    }
}
