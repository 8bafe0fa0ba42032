//! Cross-module pipeline invariants: signal monotonicity, imputation
//! calibration against ground truth, setting equivalences, sweep
//! determinism, and label-causality instrumentation.

mod common;

use common::{mean_se, pr_auc_oracle};
use ppct_core::seeding::{self, tag};
use ppct_core::*;

fn setting(kind: SettingKind, rate: f64) -> ExperimentSetting {
    ExperimentSetting {
        kind,
        optin_rate: rate,
        stopping_override: None,
    }
}

/// Fit the imputer on one half of the clicked records and score it on the
/// other half, returning (model PR-AUC, random-baseline PR-AUC).
fn imputer_heldout_auc(gen: &GenConfig, eval_seed: u64) -> (f64, f64) {
    let records = generate_logs(gen).unwrap();
    let (fit_half, eval_half) = split_train_test(&records, 0.5);
    let part = partition_labels(&fit_half, &setting(SettingKind::NonPpct, 0.0)).unwrap();
    let lr = fit_post_ranking_lr(&part.hard, &LrFitConfig::default()).unwrap();
    let eval_part = partition_labels(&eval_half, &setting(SettingKind::NonPpct, 0.0)).unwrap();
    let scores: Vec<f64> = eval_part
        .hard
        .iter()
        .map(|e| lr.logit(&e.signals).unwrap())
        .collect();
    let labels: Vec<bool> = eval_part.hard.iter().map(|e| e.z).collect();
    let model_auc = pr_auc(&scores, &labels).unwrap();

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(eval_seed);
    let random_scores: Vec<f64> = (0..labels.len()).map(|_| rng.gen::<f64>()).collect();
    let random_auc = pr_auc(&random_scores, &labels).unwrap();
    (model_auc, random_auc)
}

#[test]
fn zero_signal_strength_is_indistinguishable_from_random_ranking() {
    // With xp_signal_strength = 0 the post-ranking signals are pure noise;
    // over >= 10 seeds the fitted model's held-out PR-AUC must sit within
    // noise of a random-score baseline on the same labels.
    let mut diffs = Vec::new();
    for seed in 0..12u64 {
        let gen = GenConfig {
            n_users: 2500,
            xp_signal_strength: 0.0,
            seed: 1000 + seed,
            ..GenConfig::default()
        };
        let (model_auc, random_auc) = imputer_heldout_auc(&gen, 77 + seed);
        diffs.push(model_auc - random_auc);
    }
    let (mean, se) = mean_se(&diffs);
    assert!(
        mean.abs() <= 3.0 * se + 0.005,
        "mean model-minus-random PR-AUC {mean} (se {se}) is not noise"
    );
}

#[test]
fn strong_signal_strength_recovers_conversions() {
    let gen = GenConfig {
        n_users: 3000,
        xp_signal_strength: 4.0,
        seed: 5,
        ..GenConfig::default()
    };
    let (model_auc, _) = imputer_heldout_auc(&gen, 9);
    assert!(model_auc > 0.9, "held-out PR-AUC {model_auc}");
}

#[test]
fn imputed_mean_matches_unlabeled_conversion_rate() {
    // Ground-truth z for the unlabeled partition is a simulator privilege;
    // the mean imputed soft label must land within 3 binomial standard
    // errors of the realized unlabeled conversion rate.
    let gen = GenConfig {
        n_users: 8000,
        seed: 42,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let records = assign_optin(&records, 0.0, 3).unwrap();
    let part = partition_labels(&records, &setting(SettingKind::OptInOnly, 0.0)).unwrap();
    let lr = fit_post_ranking_lr(&part.hard, &LrFitConfig::default()).unwrap();
    let soft = impute_soft_labels(&part.unlabeled, &lr).unwrap();

    let truth: std::collections::BTreeMap<u64, bool> = records
        .iter()
        .map(|r| (r.record_id, r.ground_truth_label()))
        .collect();
    let n = soft.len() as f64;
    let true_rate = part
        .unlabeled
        .iter()
        .filter(|e| truth[&e.record_id])
        .count() as f64
        / n;
    let imputed_mean = soft.iter().map(|s| s.z_hat).sum::<f64>() / n;
    let se = (true_rate * (1.0 - true_rate) / n).sqrt();
    assert!(
        (imputed_mean - true_rate).abs() <= 3.0 * se,
        "imputed mean {imputed_mean} vs true rate {true_rate} (3se {})",
        3.0 * se
    );
}

#[test]
fn full_optin_post_ranking_equals_non_ppct_bitwise() {
    // At 100% opt-in nothing is unlabeled, so the PostRankingSignals
    // pipeline trains on exactly the NonPPCT data with the same derived
    // seeds and must reproduce its metrics bit for bit.
    let gen = GenConfig {
        n_users: 2000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let records = assign_optin(&records, 1.0, seeding::derive(gen.seed, tag::OPTIN)).unwrap();
    let cfg = PipelineConfig {
        arch: MlpArch::new(vec![16, 16, 8, 1], Activation::ReLU, 1).unwrap(),
        train: TrainConfig {
            stopping: Stopping::FixedEpochs { n: 12 },
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let non = run_setting(&setting(SettingKind::NonPpct, 1.0), &records, &cfg, 7).unwrap();
    let prs = run_setting(
        &setting(SettingKind::PostRankingSignals, 1.0),
        &records,
        &cfg,
        7,
    )
    .unwrap();
    assert_eq!(prs.n_soft, 0);
    assert_eq!(non.pr_auc.to_bits(), prs.pr_auc.to_bits());
    assert_eq!(
        non.calibration_error.to_bits(),
        prs.calibration_error.to_bits()
    );
}

#[test]
fn non_ppct_never_touches_soft_label_machinery() {
    let gen = GenConfig {
        n_users: 1500,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let records = assign_optin(&records, 0.5, 3).unwrap();
    let cfg = PipelineConfig {
        arch: MlpArch::new(vec![16, 8, 1], Activation::ReLU, 1).unwrap(),
        train: TrainConfig {
            stopping: Stopping::FixedEpochs { n: 5 },
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let cell = run_setting(&setting(SettingKind::NonPpct, 0.5), &records, &cfg, 1).unwrap();
    assert_eq!(cell.n_soft, 0);
    assert_eq!(cell.n_calibrated, 0);
    assert!(cell.n_hard > 0);
}

#[test]
fn optin_zero_matches_le13_training_data() {
    // At 0% opt-in, OptInOnly and AndroidPlusIosLe13 see the same
    // partition; trained identically (no stopping override) they coincide.
    let gen = GenConfig {
        n_users: 1500,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let records = assign_optin(&records, 0.0, 3).unwrap();
    let cfg = PipelineConfig {
        arch: MlpArch::new(vec![16, 8, 1], Activation::ReLU, 1).unwrap(),
        train: TrainConfig {
            stopping: Stopping::FixedEpochs { n: 8 },
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let optin = run_setting(&setting(SettingKind::OptInOnly, 0.0), &records, &cfg, 2).unwrap();
    let le13 = run_setting(
        &setting(SettingKind::AndroidPlusIosLe13, 0.0),
        &records,
        &cfg,
        2,
    )
    .unwrap();
    assert_eq!(optin.n_hard, le13.n_hard);
    assert_eq!(optin.pr_auc.to_bits(), le13.pr_auc.to_bits());
}

#[test]
fn sweep_is_deterministic_and_bounded() {
    let gen = GenConfig {
        n_users: 1200,
        ..GenConfig::default()
    };
    let cfg = PipelineConfig {
        arch: MlpArch::new(vec![16, 8, 1], Activation::ReLU, 1).unwrap(),
        train: TrainConfig {
            stopping: Stopping::FixedEpochs { n: 6 },
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let specs: Vec<SettingSpec> = [
        SettingKind::NonPpct,
        SettingKind::OptInOnly,
        SettingKind::PostRankingSignals,
    ]
    .iter()
    .map(|&kind| SettingSpec {
        kind,
        stopping_override: None,
    })
    .collect();
    let rates = [0.0, 0.5];
    let a = optin_sweep(&rates, &specs, 3, &gen, &cfg).unwrap();
    let b = optin_sweep(&rates, &specs, 3, &gen, &cfg).unwrap();
    assert_eq!(a, b);

    // Aggregated table covers the full grid, sorted by setting then rate.
    assert_eq!(a.aggregated.len(), specs.len() * rates.len());
    let keys: Vec<(SettingKind, u64)> = a
        .aggregated
        .iter()
        .map(|r| (r.setting, r.optin_rate.to_bits()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    // No setting beats the upper bound beyond noise.
    for r in &a.aggregated {
        let baseline = a
            .aggregated
            .iter()
            .find(|b| b.setting == SettingKind::NonPpct && b.optin_rate == r.optin_rate)
            .unwrap();
        assert!(
            r.relative_pr_auc <= 1.0 + 3.0 * r.pr_auc_se / baseline.pr_auc,
            "{} @ {} relative {} exceeds noise bound",
            r.setting.slug(),
            r.optin_rate,
            r.relative_pr_auc
        );
    }
}

#[test]
fn sweep_rejects_bad_grids() {
    let gen = GenConfig {
        n_users: 100,
        ..GenConfig::default()
    };
    let cfg = PipelineConfig::default();
    let non = [SettingSpec {
        kind: SettingKind::NonPpct,
        stopping_override: None,
    }];
    let no_baseline = [SettingSpec {
        kind: SettingKind::AndroidOnly,
        stopping_override: None,
    }];
    assert!(optin_sweep(&[0.0], &non, 1, &gen, &cfg).unwrap_err().is_config());
    assert!(optin_sweep(&[], &non, 2, &gen, &cfg).unwrap_err().is_config());
    assert!(optin_sweep(&[0.5, 0.0], &non, 2, &gen, &cfg)
        .unwrap_err()
        .is_config());
    assert!(optin_sweep(&[1.5], &non, 2, &gen, &cfg).unwrap_err().is_config());
    let err = optin_sweep(&[0.0], &no_baseline, 2, &gen, &cfg).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("non_ppct"));
}

#[test]
fn test_split_isolates_training_from_evaluation() {
    // Every id that can reach training, validation, imputer fitting, or
    // calibration comes from the train pool; the test set is disjoint.
    let gen = GenConfig {
        n_users: 2000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let records = assign_optin(&records, 0.2, 9).unwrap();
    let (train_pool, test) = split_train_test(&records, 0.2);
    let part = partition_labels(&train_pool, &setting(SettingKind::PostRankingSignals, 0.2)).unwrap();
    let test_ids: std::collections::BTreeSet<u64> = test.iter().map(|r| r.record_id).collect();
    for e in &part.hard {
        assert!(!test_ids.contains(&e.record_id));
    }
    for e in &part.unlabeled {
        assert!(!test_ids.contains(&e.record_id));
    }
}

#[test]
fn pr_auc_agrees_with_oracle_on_model_scores() {
    // End-to-end sanity: score a real trained model and compare the fast
    // implementation against the exhaustive oracle, exactly.
    let gen = GenConfig {
        n_users: 800,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let part = partition_labels(&records, &setting(SettingKind::NonPpct, 0.0)).unwrap();
    let examples: Vec<CvrExample> = part
        .hard
        .iter()
        .map(|e| CvrExample {
            features: e.features.clone(),
            target: f64::from(e.z),
        })
        .collect();
    let arch = MlpArch::new(vec![16, 8, 1], Activation::Tanh, 3).unwrap();
    let cfg = TrainConfig {
        stopping: Stopping::FixedEpochs { n: 10 },
        ..TrainConfig::default()
    };
    let (params, _) = train(&examples, &[], &arch, &cfg).unwrap();
    let scores: Vec<f64> = part
        .hard
        .iter()
        .map(|e| forward(&params, &e.features).unwrap())
        .collect();
    let labels: Vec<bool> = part.hard.iter().map(|e| e.z).collect();
    assert_eq!(
        pr_auc(&scores, &labels).unwrap(),
        pr_auc_oracle(&scores, &labels)
    );
}
