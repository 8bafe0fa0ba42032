use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ppct_core::*;

fn bench_generate(c: &mut Criterion) {
    let gen = GenConfig {
        n_users: 2000,
        ..GenConfig::default()
    };
    c.bench_function("generate_logs_2k_users", |b| {
        b.iter(|| generate_logs(black_box(&gen)).unwrap())
    });
}

fn bench_protocol(c: &mut Criterion) {
    let gen = GenConfig {
        n_users: 4000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let cfg = ProtocolConfig::default();
    c.bench_function("protocol_pipeline_4k_users", |b| {
        b.iter(|| {
            let tokens = assign_tokens(&records, cfg.grouping_policy, cfg.bits).unwrap();
            let callbacks = emit_callbacks(&records, &tokens, &cfg, 7).unwrap();
            let groups = aggregate_group_labels(&records, &tokens, &callbacks, &cfg).unwrap();
            black_box(apply_suppression(groups, cfg.suppression_k))
        })
    });
}

fn bench_imputer_fit(c: &mut Criterion) {
    let gen = GenConfig {
        n_users: 4000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let setting = ExperimentSetting {
        kind: SettingKind::NonPpct,
        optin_rate: 0.0,
        stopping_override: None,
    };
    let part = partition_labels(&records, &setting).unwrap();
    let cfg = LrFitConfig::default();
    c.bench_function("fit_post_ranking_lr", |b| {
        b.iter(|| fit_post_ranking_lr(black_box(&part.hard), &cfg).unwrap())
    });
}

fn bench_pr_auc(c: &mut Criterion) {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let n = 50_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
    c.bench_function("pr_auc_50k", |b| {
        b.iter(|| pr_auc(black_box(&scores), black_box(&labels)).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let gen = GenConfig {
        n_users: 2000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen).unwrap();
    let setting = ExperimentSetting {
        kind: SettingKind::NonPpct,
        optin_rate: 0.0,
        stopping_override: None,
    };
    let part = partition_labels(&records, &setting).unwrap();
    let examples: Vec<CvrExample> = part
        .hard
        .iter()
        .map(|e| CvrExample {
            features: e.features.clone(),
            target: f64::from(e.z),
        })
        .collect();
    let arch = MlpArch::new(vec![16, 64, 32, 1], Activation::ReLU, 1).unwrap();
    let cfg = TrainConfig {
        stopping: Stopping::FixedEpochs { n: 1 },
        ..TrainConfig::default()
    };
    c.bench_function("train_one_epoch_64x32", |b| {
        b.iter(|| train(black_box(&examples), &[], &arch, &cfg).unwrap())
    });
}

criterion_group!(
    benches,
    bench_generate,
    bench_protocol,
    bench_imputer_fit,
    bench_pr_auc,
    bench_train_epoch
);
criterion_main!(benches);
