//! Corpus generation: entropy statistics, split arithmetic, determinism,
//! re-derivable labels, normalization round trips and tabulated ingestion.

use msfnet::datagen::{
    generate_dataset, generate_steering_config, incidence_pattern_table, inject_entropy, interpretability_filter,
    read_tabulated_patterns, split_of, write_tabulated_patterns, Dataset, FilterCriteria, FilterMode,
    GenerateOptions, Normalization, Split,
};
use msfnet::measures::extract_measures;
use msfnet::{AngularGrid, MsfConfig, PhysicalParams, SeededRng};
use sha2::{Digest, Sha256};

fn hash_file(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn full_ratio_redraws_are_uniform_over_states() {
    let base = MsfConfig::uniform(12, 12, 8, 0).unwrap();
    let mut rng = SeededRng::new(7);
    let mut counts = [0u64; 8];
    let trials = 10_000;
    for _ in 0..trials {
        for &s in inject_entropy(&base, 1.0, &mut rng).unwrap().states() {
            counts[s as usize] += 1;
        }
    }
    let n = (trials * 144) as f64;
    let expected = n / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom, 0.1% upper tail.
    assert!(chi2 < 24.32, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn entropy_ratio_half_is_reproducible() {
    let base = generate_steering_config(30.0, 45.0, 12, 12, 8, &PhysicalParams::default()).unwrap();
    let a = inject_entropy(&base, 0.5, &mut SeededRng::new(3)).unwrap();
    let b = inject_entropy(&base, 0.5, &mut SeededRng::new(3)).unwrap();
    assert_eq!(a, b);
    let changed = a.states().iter().zip(base.states()).filter(|(x, y)| x != y).count();
    assert!(changed <= 72);
}

#[test]
fn uniform_config_is_interpretable() {
    let m = extract_measures(&MsfConfig::uniform(12, 12, 8, 0).unwrap(), &PhysicalParams::default(), &AngularGrid::default())
        .unwrap();
    assert!(interpretability_filter(&m, &FilterCriteria::default()));
    assert!(interpretability_filter(&m, &FilterCriteria::vacuous()));
}

#[test]
fn strict_criteria_reject_most_noise() {
    // Recorded measurement: share of fully random surfaces that would pass
    // a 20 dB / 5 dB gate.
    let strict = FilterCriteria {
        min_directivity_db: 20.0,
        min_pslr_db: 5.0,
    };
    let grid = AngularGrid::with_resolution(2.0).unwrap();
    let base = MsfConfig::uniform(12, 12, 8, 0).unwrap();
    let mut rng = SeededRng::new(11);
    let mut passed = 0;
    let n = 1000;
    for _ in 0..n {
        let c = inject_entropy(&base, 1.0, &mut rng).unwrap();
        let m = extract_measures(&c, &PhysicalParams::default(), &grid).unwrap();
        if interpretability_filter(&m, &strict) {
            passed += 1;
        }
    }
    let rate = f64::from(passed) / f64::from(n);
    println!("random-surface acceptance rate at 20 dB / 5 dB: {rate:.3}");
    assert!(rate < 0.5, "{rate}");
}

#[test]
fn hundred_thousand_indices_split_68_17_15() {
    let mut counts = [0usize; 3];
    for i in 0..100_000 {
        counts[match split_of(42, i) {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }] += 1;
    }
    assert_eq!(counts, [68_000, 17_000, 15_000]);
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions::default();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    generate_dataset(100, 42, &opts).unwrap().save(&a).unwrap();
    generate_dataset(100, 42, &opts).unwrap().save(&b).unwrap();
    assert_eq!(hash_file(&a), hash_file(&b));
    let other = dir.path().join("c.jsonl");
    generate_dataset(100, 43, &opts).unwrap().save(&other).unwrap();
    assert_ne!(hash_file(&a), hash_file(&other));
}

#[test]
fn stored_labels_are_rederivable_and_survive_a_round_trip() {
    let ds = generate_dataset(1000, 5, &GenerateOptions::default()).unwrap();
    assert_eq!(ds.audit(1e-9).unwrap(), Vec::<usize>::new());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.records.len(), 1000);
    for (a, b) in ds.records.iter().zip(&back.records) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.split, b.split);
        assert_eq!(a.meta, b.meta);
        let (x, y) = (a.measures.to_array(), b.measures.to_array());
        for k in 0..5 {
            assert!(x[k] == y[k] || (x[k].is_infinite() && y[k].is_infinite()));
        }
    }
    assert_eq!(ds.normalization, back.normalization);
}

#[test]
fn reject_mode_keeps_only_interpretable_samples() {
    let opts = GenerateOptions {
        filter_mode: FilterMode::Reject,
        ..GenerateOptions::default()
    };
    let ds = generate_dataset(50, 9, &opts).unwrap();
    assert_eq!(ds.len(), 50);
    for r in &ds.records {
        assert!(r.meta.interpretable);
        assert!(interpretability_filter(&r.measures, &opts.criteria));
    }
}

#[test]
fn standardization_round_trips() {
    let mut rng = SeededRng::new(1);
    let targets: Vec<[f64; 5]> = (0..1000).map(|_| std::array::from_fn(|k| rng.normal() * (k + 1) as f64 + 10.0)).collect();
    let norm = Normalization::from_targets(targets.iter(), 8);
    let mut worst = 0.0f64;
    for t in &targets {
        let back = norm.destandardize(&norm.standardize(t).unwrap());
        for k in 0..5 {
            worst = worst.max((back[k] - t[k]).abs());
        }
    }
    assert!(worst < 1e-12, "{worst}");
    assert_eq!(norm.standardize(&norm.target_mean).unwrap(), [0.0; 5]);
    let c = MsfConfig::uniform(2, 2, 8, 7).unwrap();
    assert_eq!(norm.normalize_inputs(&c), vec![1.0; 4]);
}

#[test]
fn synthetic_incidence_table_ingests_8100_rows() {
    let config = generate_steering_config(20.0, 0.0, 12, 12, 8, &PhysicalParams::default()).unwrap();
    let (f, t) = incidence_pattern_table(&config, &PhysicalParams::default(), 90, 90, 90);
    let mut buf = Vec::new();
    write_tabulated_patterns(&mut buf, &f, &t).unwrap();
    let data = read_tabulated_patterns(buf.as_slice(), 0).unwrap();
    assert_eq!(data.features.dim(), (8100, 2));
    assert_eq!(data.targets.dim(), (8100, 90));
    assert_eq!(data.train.len() + data.test.len(), 8100);
    assert!(data.targets.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
}
