mod common;

use common::synthetic;
use specbp::executor::{
    epoch_order, train, train_baseline, train_shadow, train_speculative, train_speculative_detailed, Mode, TrainConfig,
};
use specbp::Error;

const ALL_LABELS: [u8; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn cfg(mode: Mode, threshold: f32, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        threshold,
        epochs,
        seed,
        audit: true,
        ..TrainConfig::default()
    }
}

#[test]
fn baseline_is_deterministic() {
    let train_set = synthetic(300, 1, &ALL_LABELS);
    let test_set = synthetic(50, 2, &ALL_LABELS);
    let a = train_baseline(&cfg(Mode::Baseline, 0.25, 2, 7), &train_set, &test_set).unwrap();
    let b = train_baseline(&cfg(Mode::Baseline, 0.25, 2, 7), &train_set, &test_set).unwrap();
    assert_eq!(a.final_params_digest, b.final_params_digest);
    assert_eq!(a.records.len(), 2);
    assert!(a.records[1].cumulative_time_s > a.records[0].cumulative_time_s);
    assert!(a
        .records
        .iter()
        .all(|r| r.updates == 20 && r.samples == 300 && r.hit_rate == 0.0));
}

#[test]
fn never_firing_speculation_reproduces_baseline_bit_for_bit() {
    let train_set = synthetic(450, 3, &ALL_LABELS);
    let test_set = synthetic(40, 4, &ALL_LABELS);
    for seed in [1, 2, 3] {
        let base = train_baseline(&cfg(Mode::Baseline, -1.0, 2, seed), &train_set, &test_set).unwrap();
        let spec = train_speculative(&cfg(Mode::Speculative, -1.0, 2, seed), &train_set, &test_set).unwrap();
        assert_eq!(base.final_params_digest, spec.final_params_digest, "seed {seed}");
        assert_eq!(base.final_params, spec.final_params);
        for (b, s) in base.records.iter().zip(&spec.records) {
            assert_eq!(b.accuracy_pct, s.accuracy_pct);
            assert_eq!(s.hits, 0);
            assert_eq!(s.hit_rate, 0.0);
            assert_eq!(b.updates, s.updates);
        }
    }
}

#[test]
fn huge_threshold_misses_only_cold_slots() {
    let train_set = synthetic(200, 5, &ALL_LABELS);
    let test_set = synthetic(20, 6, &ALL_LABELS);
    let out = train_speculative_detailed(&cfg(Mode::Speculative, 2.0, 3, 9), &train_set, &test_set).unwrap();
    let counters = out.report.counters();
    assert_eq!(counters.misses, 10);
    assert_eq!(counters.total(), 600);
    assert_eq!(out.report.records[0].hit_rate, 190.0 / 200.0);
    assert_eq!(out.cache.len(), 10);
    assert!(out.cache.is_label_pure());
}

#[test]
fn shadow_follows_baseline_trajectory() {
    let train_set = synthetic(300, 7, &ALL_LABELS);
    let test_set = synthetic(30, 8, &ALL_LABELS);
    let base = train_baseline(&cfg(Mode::Baseline, 0.25, 2, 11), &train_set, &test_set).unwrap();
    let shadow = train_shadow(&cfg(Mode::Shadow, 0.25, 2, 11), &train_set, &test_set).unwrap();
    assert_eq!(base.final_params_digest, shadow.report.final_params_digest);
    assert_eq!(shadow.observations.len(), 600);
    assert_eq!(shadow.offline_hits(0.25), shadow.report.counters().hits);

    let thresholds = [-1.0, 0.0, 0.01, 0.05, 0.1, 0.175, 0.25, 0.5, 1.0, 2.0];
    let counts: Vec<u64> = thresholds.iter().map(|&t| shadow.offline_hits(t)).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert_eq!(counts[0], 0);
}

#[test]
fn shadow_and_speculative_agree_on_first_batch() {
    // few labels so slots get revisited inside the first batch
    let train_set = synthetic(15, 12, &[0, 1, 2]);
    let test_set = synthetic(10, 13, &ALL_LABELS);
    for threshold in [0.0, 0.01, 0.05, 0.25, 1.0] {
        let shadow = train_shadow(&cfg(Mode::Shadow, threshold, 1, 3), &train_set, &test_set).unwrap();
        let spec = train_speculative(&cfg(Mode::Speculative, threshold, 1, 3), &train_set, &test_set).unwrap();
        assert_eq!(shadow.report.counters(), spec.counters(), "theta {threshold}");
    }
}

#[test]
fn conservation_and_audit() {
    let train_set = synthetic(310, 14, &ALL_LABELS);
    let test_set = synthetic(25, 15, &ALL_LABELS);
    for mode in [Mode::Baseline, Mode::Speculative, Mode::Shadow] {
        let report = train(&cfg(mode, 0.1, 2, 5), &train_set, &test_set).unwrap();
        // 310 = 20 full batches of 15 plus one of 10
        assert!(
            report.records.iter().all(|r| r.updates == 21 && r.samples == 310),
            "{mode}"
        );
        if mode != Mode::Baseline {
            assert_eq!(report.counters().total(), 620);
        }
        let audit = report.audit.unwrap();
        assert!(audit.max_abs_gradient <= 5.0);
        assert!(audit.max_softmax_deviation < 1e-6);
        assert_eq!(audit.snapshot_violations, 0);
        assert_eq!(audit.trace_violations, 0);
        assert!(report.records.iter().all(|r| (0.0..=100.0).contains(&r.accuracy_pct)));
    }
}

#[test]
fn clip_bound_applies_to_reused_gradients() {
    let train_set = synthetic(150, 16, &ALL_LABELS);
    let test_set = synthetic(10, 17, &ALL_LABELS);
    let tight = TrainConfig {
        clip_bound: 0.05,
        ..cfg(Mode::Speculative, 0.5, 1, 2)
    };
    let report = train_speculative(&tight, &train_set, &test_set).unwrap();
    assert!(report.audit.unwrap().max_abs_gradient <= 0.05);
    assert!(report.counters().hits > 0);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(1000, 42, 1);
    assert_eq!(a, epoch_order(1000, 42, 1));
    assert_ne!(a, epoch_order(1000, 42, 2));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
}

#[test]
fn usage_errors() {
    let test_set = synthetic(5, 1, &ALL_LABELS);
    let empty = [];
    assert!(matches!(
        train_baseline(&cfg(Mode::Baseline, 0.1, 1, 1), &empty, &test_set),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        train_speculative(&cfg(Mode::Speculative, 0.1, 1, 1), &empty, &test_set),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        train_shadow(&cfg(Mode::Shadow, 0.1, 1, 1), &empty, &test_set),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        train_baseline(&cfg(Mode::Shadow, 0.1, 1, 1), &test_set, &test_set),
        Err(Error::Usage(_))
    ));
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..cfg(Mode::Baseline, 0.1, 1, 1)
    };
    assert!(train_baseline(&zero_batch, &test_set, &test_set).is_err());

    let mut bad = synthetic(5, 2, &ALL_LABELS);
    bad[3].label = 12;
    assert!(matches!(
        train_speculative(&cfg(Mode::Speculative, 0.1, 1, 1), &bad, &test_set),
        Err(Error::Domain { label: 12, .. })
    ));
}
