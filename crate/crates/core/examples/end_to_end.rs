//! Single-seed walk through the whole pipeline: generate logs, run the
//! reporting channel over the unlabeled partition, impute and calibrate
//! soft labels, train the CVR model, and score the held-out test set.
//!
//! Run: `cargo run --release -p ppct-core --example end_to_end`

use ppct_core::seeding::{self, tag};
use ppct_core::*;

fn main() -> Result<()> {
    let gen = GenConfig {
        n_users: 6000,
        ..GenConfig::default()
    };
    let records = generate_logs(&gen)?;
    println!(
        "generated {} impressions ({} clicked)",
        records.len(),
        records.iter().filter(|r| r.y).count()
    );

    // Nobody opted in: every iOS >= 14 click loses its label.
    let records = assign_optin(&records, 0.0, seeding::derive(gen.seed, tag::OPTIN))?;
    let (train_pool, test) = split_train_test(&records, 0.2);
    let setting = ExperimentSetting {
        kind: SettingKind::PostRankingSignals,
        optin_rate: 0.0,
        stopping_override: None,
    };
    let partition = partition_labels(&train_pool, &setting)?;
    println!(
        "partition: {} hard, {} unlabeled",
        partition.hard.len(),
        partition.unlabeled.len()
    );

    // Reporting channel over the unlabeled clicks only.
    let protocol = ProtocolConfig {
        window_h: gen.horizon_h + 48.0 + 1.0, // one all-covering window
        ..ProtocolConfig::default()
    };
    let unlabeled_ids: std::collections::BTreeSet<u64> =
        partition.unlabeled.iter().map(|e| e.record_id).collect();
    let ppct_records: Vec<LogRecord> = train_pool
        .iter()
        .filter(|r| unlabeled_ids.contains(&r.record_id))
        .cloned()
        .collect();
    let tokens = assign_tokens(&ppct_records, protocol.grouping_policy, protocol.bits)?;
    let callbacks = emit_callbacks(&ppct_records, &tokens, &protocol, gen.seed)?;
    let groups = apply_suppression(
        aggregate_group_labels(&ppct_records, &tokens, &callbacks, &protocol)?,
        protocol.suppression_k,
    );
    println!(
        "protocol: {} callbacks, {} groups ({} suppressed)",
        callbacks.len(),
        groups.len(),
        groups.iter().filter(|g| g.suppressed).count()
    );

    // Impute soft labels and calibrate them against the group counts.
    let lr = fit_post_ranking_lr(&partition.hard, &LrFitConfig::default())?;
    let soft = impute_soft_labels(&partition.unlabeled, &lr)?;
    let membership: std::collections::BTreeMap<u64, GroupKey> = ppct_records
        .iter()
        .filter_map(|r| protocol::group_key_for(r, &tokens, protocol.window_h).map(|k| (r.record_id, k)))
        .collect();
    let soft = calibrate_soft_labels(&soft, &membership, &groups)?;
    println!(
        "imputed {} soft labels ({} calibrated)",
        soft.len(),
        soft.iter().filter(|s| s.calibrated).count()
    );

    // Train on hard labels plus soft labels and evaluate against the
    // simulator's ground truth.
    let hard: Vec<CvrExample> = partition
        .hard
        .iter()
        .map(|e| CvrExample {
            features: e.features.clone(),
            target: f64::from(e.z),
        })
        .collect();
    let soft_examples: Vec<CvrExample> = partition
        .unlabeled
        .iter()
        .zip(&soft)
        .map(|(e, s)| CvrExample {
            features: e.features.clone(),
            target: s.z_hat,
        })
        .collect();
    let arch = MlpArch::new(vec![gen.dim_x, 64, 32, 1], Activation::ReLU, 1)?;
    let (model, trace) = train(&hard, &soft_examples, &arch, &TrainConfig::default())?;
    println!(
        "trained {} epochs (best epoch {:?})",
        trace.epochs.len(),
        trace.best_epoch
    );

    let clicked: Vec<&LogRecord> = test.iter().filter(|r| r.y).collect();
    let scores: Vec<f64> = clicked
        .iter()
        .map(|r| forward(&model, &r.x))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = clicked.iter().map(|r| r.ground_truth_label()).collect();
    println!(
        "held-out test: PR-AUC {:.4}, calibration error {:.4} over {} clicked rows",
        pr_auc(&scores, &labels)?,
        calibration_error(&scores, &labels, 10)?,
        clicked.len()
    );
    Ok(())
}
