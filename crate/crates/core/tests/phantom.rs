use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use radiopipe::dataset::load_dataset;
use radiopipe::deepfeatures::{KernelKind, KernelSpec};
use radiopipe::experiments::{run_experiment, ExperimentConfig, Regime, SourceSpec};
use radiopipe::modelzoo::ArchName;
use radiopipe::phantom::{generate_phantom, PhantomConfig, PhantomError};

fn tiny(n: usize, effect: f64, seed: u64) -> PhantomConfig {
    PhantomConfig {
        n_cases: n,
        effect_size: effect,
        volume_shape: (3, 48, 48),
        lesion_size_range: (10, 16),
        seed,
        ..PhantomConfig::default()
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn thirty_cases_at_one_third_gives_ten_positives() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_phantom(&tiny(30, 2.0, 0), dir.path()).unwrap();
    assert_eq!(summary.n_positive, 10);
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.skipped.is_empty());
    assert_eq!(
        ds.cases.iter().filter(|c| c.label.is_positive()).count(),
        10
    );
}

#[test]
fn same_config_gives_byte_identical_trees() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_phantom(&tiny(8, 1.0, 4), a.path()).unwrap();
    generate_phantom(&tiny(8, 1.0, 4), b.path()).unwrap();
    let ta = tree_bytes(a.path());
    assert!(ta.contains_key("phantom_config.json"));
    assert_eq!(ta, tree_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_phantom(&tiny(8, 1.0, 5), c.path()).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn spacing_mixture_is_respected_within_one_case() {
    let cfg = tiny(37, 2.0, 1);
    let dir = tempfile::tempdir().unwrap();
    generate_phantom(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    for w in &cfg.spacing_mixture {
        let n = ds
            .cases
            .iter()
            .filter(|c| c.series.pixel_spacing == w.spacing)
            .count() as f64;
        assert!((n - w.weight * 37.0).abs() <= 1.0, "{w:?}: {n}");
    }
}

#[test]
fn lesion_enhancement_ratio_tracks_the_effect() {
    let dir = tempfile::tempdir().unwrap();
    generate_phantom(&tiny(24, 2.0, 2), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mut ratio = [Vec::new(), Vec::new()];
    for c in &ds.cases {
        let b = c.annotation.primary_box();
        let mut late = 0.0;
        let mut early = 0.0;
        for r in b.row_min..=b.row_max {
            for col in b.col_min..=b.col_max {
                let pre = c.series.pre.get(b.slice_index, r, col) as f64;
                early += c.series.post1.get(b.slice_index, r, col) as f64 - pre;
                late += c.series.post3.get(b.slice_index, r, col) as f64 - pre;
            }
        }
        ratio[c.label.is_positive() as usize].push(late / early);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&ratio[1]) > mean(&ratio[0]) + 0.3, "{ratio:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(10, 1.0, 0);
    c.positive_fraction = 1.0;
    assert!(matches!(
        generate_phantom(&c, dir.path()),
        Err(PhantomError::Config(_))
    ));
    let mut c = tiny(10, 1.0, 0);
    c.spacing_mixture[0].weight = 0.9;
    assert!(matches!(
        generate_phantom(&c, dir.path()),
        Err(PhantomError::Config(_))
    ));
    let mut c = tiny(10, 1.0, 0);
    c.effect_size = -1.0;
    assert!(matches!(
        generate_phantom(&c, dir.path()),
        Err(PhantomError::Config(_))
    ));
}

#[test]
fn unwritable_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain_file");
    fs::write(&file, b"x").unwrap();
    assert!(matches!(
        generate_phantom(&tiny(4, 1.0, 0), &file.join("sub")),
        Err(PhantomError::Io { .. })
    ));
}

/// Off-the-shelf AUC from the conv3 tap of a random cifar extractor, averaged over 3 phantom seeds.
fn features_auc(effect: f64) -> f64 {
    let mut total = 0.0;
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        generate_phantom(&tiny(30, effect, 100 + seed), &dir.path().join("data")).unwrap();
        let mut cfg = ExperimentConfig::new(
            dir.path().join("data"),
            Regime::Features,
            dir.path().join("out"),
        );
        cfg.architecture = Some(ArchName::Cifar);
        cfg.patch_size = Some(32);
        cfg.tap = Some("conv3".into());
        cfg.kernel = Some(KernelSpec::new(KernelKind::Linear));
        cfg.k_folds = 3;
        cfg.source = Some(SourceSpec::Random { seed: 7 });
        total += run_experiment(&cfg).unwrap().rows[0].test_auc;
    }
    total / 3.0
}

#[test]
fn off_the_shelf_auc_is_monotone_in_effect_size() {
    let aucs: Vec<f64> = [0.0, 0.5, 2.0].iter().map(|&e| features_auc(e)).collect();
    assert!(aucs[1] + 0.03 >= aucs[0], "{aucs:?}");
    assert!(aucs[2] + 0.03 >= aucs[1], "{aucs:?}");
    assert!(aucs[2] >= 0.8, "{aucs:?}");
}
