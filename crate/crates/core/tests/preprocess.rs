mod common;

use common::case_with_boxes;
use proptest::prelude::*;
use radiopipe::dataset::{BoundingBox, Volume, VolumeSeries};
use radiopipe::preprocess::{
    augment_patch, build_subtraction_channels, harmonize_case, resample_bilinear, resample_plane,
    resampled_dims, AugmentationSpec, ChannelImage, Transform,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar bilinear oracle with half-pixel centers and edge clamping.
fn oracle_resample(src: &[f32], rows: usize, cols: usize, out_r: usize, out_c: usize) -> Vec<f32> {
    let sr = rows as f64 / out_r as f64;
    let sc = cols as f64 / out_c as f64;
    let mut out = Vec::new();
    for i in 0..out_r {
        for j in 0..out_c {
            let y = ((i as f64 + 0.5) * sr - 0.5)
                .max(0.0)
                .min((rows - 1) as f64);
            let x = ((j as f64 + 0.5) * sc - 0.5)
                .max(0.0)
                .min((cols - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(rows - 1), (x0 + 1).min(cols - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |r: usize, c: usize| src[r * cols + c] as f64;
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx;
            out.push(v as f32);
        }
    }
    out
}

fn random_volume(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Volume {
    let n = dims.0 * dims.1 * dims.2;
    Volume::new(dims, (0..n).map(|_| rng.gen_range(-50.0..200.0)).collect())
}

proptest! {
    #[test]
    fn resampling_matches_scalar_oracle(
        rows in 1usize..9, cols in 1usize..9, out_r in 1usize..9, out_c in 1usize..9, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let got = resample_plane(&src, rows, cols, out_r, out_c,
            (rows as f64 / out_r as f64, cols as f64 / out_c as f64));
        let want = oracle_resample(&src, rows, cols, out_r, out_c);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-6 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }

    #[test]
    fn subtraction_channels_match_elementwise_difference(seed in any::<u64>(), s in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = (3, 5, 6);
        let series = VolumeSeries {
            pre: random_volume(&mut rng, dims),
            post1: random_volume(&mut rng, dims),
            post2: random_volume(&mut rng, dims),
            post3: random_volume(&mut rng, dims),
            pixel_spacing: (0.7, 0.7),
        };
        let img = build_subtraction_channels(&series, s).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                let pre = series.pre.get(s, r, c);
                prop_assert_eq!(img.get(r, c, 0), series.post1.get(s, r, c) - pre);
                prop_assert_eq!(img.get(r, c, 1), series.post2.get(s, r, c) - pre);
                prop_assert_eq!(img.get(r, c, 2), series.post3.get(s, r, c) - pre);
            }
        }
    }
}

#[test]
fn identity_resample_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_volume(&mut rng, (2, 7, 5));
    assert_eq!(resample_bilinear(&v, (0.8, 0.8), (0.8, 0.8)).unwrap(), v);
    let plane = v.slice(0);
    assert_eq!(
        resample_plane(plane, 7, 5, 7, 5, (1.0, 1.0)),
        plane.to_vec()
    );
}

#[test]
fn resampling_never_touches_the_slice_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(&mut rng, (4, 12, 10));
    let out = resample_bilinear(&v, (0.8, 0.8), (0.7, 0.7)).unwrap();
    assert_eq!(out.dims.0, 4);
    assert_eq!(
        (out.dims.1, out.dims.2),
        resampled_dims(12, 10, (0.8, 0.8), (0.7, 0.7))
    );
}

#[test]
fn harmonization_rescales_boxes_with_the_image() {
    let case = case_with_boxes(&[BoundingBox::new(0, 7, 7, 14, 14)], (1, 32, 32), true);
    let mut case = case;
    case.series.pixel_spacing = (0.8, 0.8);
    let out = harmonize_case(&case, (0.4, 0.4)).unwrap();
    assert_eq!(out.series.dims(), (1, 64, 64));
    assert_eq!(out.series.pixel_spacing, (0.4, 0.4));
    let b = out.annotation.boxes[0];
    assert!(b.row_min >= 13 && b.row_min <= 15, "{b:?}");
    assert!(b.row_max >= 28 && b.row_max <= 30, "{b:?}");
}

fn image(seed: u64) -> ChannelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChannelImage {
        rows: 40,
        cols: 40,
        pixels: (0..40 * 40 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        slice_index: 2,
        case_id: "case_0001".into(),
    }
}

#[test]
fn augmentation_yields_base_plus_four_and_is_deterministic() {
    let img = image(3);
    let spec = AugmentationSpec::default();
    let a = augment_patch(&img, (20, 20), 16, &spec).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a[0].transform, Transform::IDENTITY);
    assert!(a[1..].iter().all(|p| !p.transform.is_identity()));
    for p in &a[1..] {
        assert!(p.transform.d_row.abs() <= 8 && p.transform.d_col.abs() <= 8);
        assert!(p.transform.angle_deg.abs() <= 20.0);
    }
    assert_eq!(a, augment_patch(&img, (20, 20), 16, &spec).unwrap());
    let other = AugmentationSpec { seed: 1, ..spec };
    assert_ne!(
        a[1..],
        augment_patch(&img, (20, 20), 16, &other).unwrap()[1..]
    );
}

#[test]
fn zero_rotation_augmentation_is_a_pure_shift() {
    let img = image(4);
    let spec = AugmentationSpec {
        max_rotation_deg: 0.0,
        ..AugmentationSpec::default()
    };
    for p in augment_patch(&img, (20, 20), 8, &spec).unwrap() {
        let (cr, cc) = (20 + p.transform.d_row, 20 + p.transform.d_col);
        for i in 0..8 {
            for j in 0..8 {
                let (r, c) = ((cr - 4 + i) as usize, (cc - 4 + j) as usize);
                assert_eq!(p.get(i as usize, j as usize, 1), img.get(r, c, 1));
            }
        }
    }
}

#[test]
fn negative_bounds_are_rejected() {
    let spec = AugmentationSpec {
        max_translation_px: -1,
        ..AugmentationSpec::default()
    };
    assert!(augment_patch(&image(0), (20, 20), 8, &spec).is_err());
}
