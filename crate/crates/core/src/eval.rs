//! Metrics, experiment settings, and the opt-in-rate sweep.
//!
//! The five label-availability settings share one pipeline: hold out a test
//! set, partition the training pool's clicked records into hard and
//! unlabeled examples per the setting, optionally run the reporting channel
//! and impute (calibrated) soft labels, train, then score the held-out test
//! set against the simulator's ground truth. Evaluation against true labels
//! is a simulator privilege: the test set is fully labeled in every setting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    assign_optin, generate_logs, partition_labels,sigmoid, GenConfig, LogRecord,
};
use crate::error::{Error, Result};
use crate::imputer::{
    calibrate_soft_labels, fit_post_ranking_lr, impute_soft_labels, LrFitConfig,
};
use crate::model::{
    forward, train, train_mtl, CvrExample, MlpArch, Stopping, TrainConfig,
};
use crate::protocol::{
    aggregate_group_labels, apply_count_noise, apply_suppression, assign_tokens, emit_callbacks,
    group_key_for, ProtocolConfig,
};
use crate::seeding::{self, tag};

/// The five label-availability settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingKind {
    /// All individual labels available; the upper bound.
    NonPpct,
    /// Labels for Android only; the worst case.
    AndroidOnly,
    /// Labels for Android and iOS on OS <= 13 (late adopters).
    AndroidPlusIosLe13,
    /// Android + iOS <= 13 plus opted-in iOS users.
    OptInOnly,
    /// OptInOnly's hard labels plus imputed soft labels for the rest.
    PostRankingSignals,
}

pub const ALL_SETTINGS: [SettingKind; 5] = [
    SettingKind::NonPpct,
    SettingKind::AndroidOnly,
    SettingKind::AndroidPlusIosLe13,
    SettingKind::OptInOnly,
    SettingKind::PostRankingSignals,
];

impl SettingKind {
    /// Stable slug used in CSV exports and config files.
    pub fn slug(&self) -> &'static str {
        match self {
            SettingKind::NonPpct => "non_ppct",
            SettingKind::AndroidOnly => "android_only",
            SettingKind::AndroidPlusIosLe13 => "android_ios_le13",
            SettingKind::OptInOnly => "opt_in_only",
            SettingKind::PostRankingSignals => "post_ranking_signals",
        }
    }

    /// Human-readable name for summary tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            SettingKind::NonPpct => "Non-PPCT",
            SettingKind::AndroidOnly => "Android only",
            SettingKind::AndroidPlusIosLe13 => "Android + iOS <= 13",
            SettingKind::OptInOnly => "Opt-in only",
            SettingKind::PostRankingSignals => "Post-ranking signals",
        }
    }

    /// Whether the training partition depends on the opt-in rate.
    pub fn uses_optin_rate(&self) -> bool {
        matches!(
            self,
            SettingKind::OptInOnly | SettingKind::PostRankingSignals
        )
    }
}

impl std::fmt::Display for SettingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.slug())
    }
}

impl std::str::FromStr for SettingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_SETTINGS
            .iter()
            .find(|k| k.slug() == s)
            .copied()
            .ok_or_else(|| {
                Error::config(
                    "settings",
                    format!(
                        "unknown setting {s:?} (expected one of {})",
                        ALL_SETTINGS.map(|k| k.slug()).join("|")
                    ),
                )
            })
    }
}

/// A fully specified experiment setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetting {
    pub kind: SettingKind,
    /// Used by OptInOnly and PostRankingSignals; ignored otherwise.
    pub optin_rate: f64,
    /// Fixed-epoch override (AndroidPlusIosLe13's concession); None keeps
    /// the configured stopping rule.
    pub stopping_override: Option<usize>,
}

/// A setting to sweep: the rate comes from the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettingSpec {
    pub kind: SettingKind,
    pub stopping_override: Option<usize>,
}

/// Everything a single pipeline run needs besides the data.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub protocol: ProtocolConfig,
    pub arch: MlpArch,
    pub train: TrainConfig,
    pub imputer: LrFitConfig,
    pub use_mtl: bool,
    /// Fraction of users held out for the fully-labeled test set.
    pub test_fraction: f64,
    /// Bins for the expected-calibration-error report.
    pub calibration_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            protocol: ProtocolConfig::default(),
            arch: MlpArch::new(vec![16, 64, 32, 1], crate::model::Activation::ReLU, 1)
                .expect("static arch"),
            train: TrainConfig::default(),
            imputer: LrFitConfig::default(),
            use_mtl: false,
            test_fraction: 0.2,
            calibration_bins: 10,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must be in (0, 1)"));
        }
        if self.calibration_bins == 0 {
            return Err(Error::config("calibration_bins", "must be >= 1"));
        }
        Ok(())
    }
}

/// Single-seed result for one (setting, rate) cell, with instrumentation
/// counters for the training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub setting: SettingKind,
    pub optin_rate: f64,
    pub seed: u64,
    pub pr_auc: f64,
    pub calibration_error: f64,
    /// Hard-labeled examples that entered training.
    pub n_hard: usize,
    /// Soft-labeled examples that entered training.
    pub n_soft: usize,
    /// Soft labels that were calibrated against a group label.
    pub n_calibrated: usize,
}

/// Aggregated metrics for one (setting, rate) cell over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub setting: SettingKind,
    pub optin_rate: f64,
    pub pr_auc: f64,
    /// Standard error over seeds: sample std / sqrt(n).
    pub pr_auc_se: f64,
    /// Ratio of this cell's mean PR-AUC to the NonPPCT mean at the same rate.
    pub relative_pr_auc: f64,
    pub calibration_error: f64,
    pub n_seeds: usize,
}

/// Full sweep output: per-cell rows plus the aggregated table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub cells: Vec<CellReport>,
    pub aggregated: Vec<MetricsReport>,
}

/// Area under the precision-recall curve by descending-threshold step
/// integration. Tied scores collapse into a single threshold step, so the
/// value does not depend on input order.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "pr_auc inputs",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "PR-AUC needs both classes; got {pos} positives of {}",
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let threshold = scores[idx[i]];
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == threshold {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(auc)
}

/// Expected calibration error over equal-width bins on [0, 1].
pub fn calibration_error(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be >= 1"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "calibration_error inputs",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Invalid("empty input".into()));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Invalid("scores must be probabilities in [0, 1]".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut score_sum = vec![0.0; n_bins];
    let mut pos_sum = vec![0.0; n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        score_sum[b] += s;
        pos_sum[b] += f64::from(l);
    }
    let n = scores.len() as f64;
    let mut ece = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        ece += (c / n) * ((score_sum[b] / c) - (pos_sum[b] / c)).abs();
    }
    Ok(ece)
}

/// Estimated value of one impression to an advertiser bidding `bid` per
/// conversion: bid * p(click) * p(conversion | click).
pub fn impression_value(bid: f64, p_click: f64, p_conv: f64) -> f64 {
    debug_assert!(bid >= 0.0);
    debug_assert!((0.0..=1.0).contains(&p_click));
    debug_assert!((0.0..=1.0).contains(&p_conv));
    bid * p_click * p_conv
}

/// Deterministic user-level train/test split. Membership depends only on
/// the user id, so every setting and rate at a given seed scores against
/// the same held-out users.
pub fn split_train_test(records: &[LogRecord], test_fraction: f64) -> (Vec<LogRecord>, Vec<LogRecord>) {
    const SPLIT_SALT: u64 = 0xde5c;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if seeding::unit_f64(SPLIT_SALT, tag::TEST_SPLIT, r.user_id) < test_fraction {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, test)
}

/// A completed single-setting pipeline run.
#[derive(Debug, Clone)]
pub struct SettingRun {
    pub report: CellReport,
    pub model: crate::model::ModelParams,
    pub trace: crate::model::TrainingTrace,
    /// Fitted post-ranking model, when the setting imputed soft labels.
    pub imputer: Option<crate::imputer::LrParams>,
    /// The (calibrated) soft labels that entered training.
    pub soft_labels: Vec<crate::imputer::SoftLabel>,
}

/// Run one setting at one seed: partition, (for PostRankingSignals) simulate
/// the reporting channel and impute calibrated soft labels, train, and score
/// the held-out test set.
///
/// `records` must already carry the opt-in flags for `setting.optin_rate`.
/// Groups whose reported count exceeds their member count (window-boundary
/// pileup) are excluded from calibration.
pub fn run_setting(
    setting: &ExperimentSetting,
    records: &[LogRecord],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<CellReport> {
    run_setting_full(setting, records, cfg, seed).map(|run| run.report)
}

/// As [`run_setting`], also returning the trained model and its trace.
pub fn run_setting_full(
    setting: &ExperimentSetting,
    records: &[LogRecord],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SettingRun> {
    cfg.validate()?;
    let (train_pool, test) = split_train_test(records, cfg.test_fraction);
    debug_assert!({
        let train_ids: std::collections::BTreeSet<u64> =
            train_pool.iter().map(|r| r.record_id).collect();
        test.iter().all(|r| !train_ids.contains(&r.record_id))
    });

    let partition =
        partition_labels(&train_pool, setting).map_err(|e| e.in_stage("partition"))?;

    let mut n_calibrated = 0usize;
    let mut fitted_imputer = None;
    let mut soft_labels = Vec::new();
    let soft_examples: Vec<CvrExample> = if setting.kind == SettingKind::PostRankingSignals
        && !partition.unlabeled.is_empty()
    {
        let unlabeled_ids: std::collections::BTreeSet<u64> =
            partition.unlabeled.iter().map(|e| e.record_id).collect();
        let ppct_records: Vec<LogRecord> = train_pool
            .iter()
            .filter(|r| unlabeled_ids.contains(&r.record_id))
            .cloned()
            .collect();

        let tokens = assign_tokens(
            &ppct_records,
            cfg.protocol.grouping_policy,
            cfg.protocol.bits,
        )
        .map_err(|e| e.in_stage("tokens"))?;
        let callbacks = emit_callbacks(&ppct_records, &tokens, &cfg.protocol, seed)
            .map_err(|e| e.in_stage("callbacks"))?;
        let groups = aggregate_group_labels(&ppct_records, &tokens, &callbacks, &cfg.protocol)
            .map_err(|e| e.in_stage("aggregate"))?;
        let mut groups = apply_suppression(groups, cfg.protocol.suppression_k);
        if cfg.protocol.count_noise_magnitude > 0 {
            groups = apply_count_noise(groups, cfg.protocol.count_noise_magnitude, seed);
        }
        // Boundary pileup can report more conversions than a group has
        // members; such groups cannot be calibrated and are passed through.
        for g in groups.iter_mut() {
            if g.conversions > g.click_count {
                log::debug!(
                    "group ({}, token {}, window {}) over-reports ({} > {}); skipping calibration",
                    g.target_app,
                    g.token.value(),
                    g.window_index,
                    g.conversions,
                    g.click_count
                );
                g.suppressed = true;
            }
        }

        let lr = fit_post_ranking_lr(&partition.hard, &cfg.imputer)
            .map_err(|e| e.in_stage("imputer-fit"))?;
        let soft = impute_soft_labels(&partition.unlabeled, &lr)
            .map_err(|e| e.in_stage("impute"))?;
        let membership: BTreeMap<u64, crate::protocol::GroupKey> = ppct_records
            .iter()
            .filter_map(|r| group_key_for(r, &tokens, cfg.protocol.window_h).map(|k| (r.record_id, k)))
            .collect();
        let soft = calibrate_soft_labels(&soft, &membership, &groups)
            .map_err(|e| e.in_stage("calibrate"))?;
        n_calibrated = soft.iter().filter(|s| s.calibrated).count();
        fitted_imputer = Some(lr);

        let examples = partition
            .unlabeled
            .iter()
            .zip(&soft)
            .map(|(e, s)| {
                debug_assert_eq!(e.record_id, s.record_id);
                CvrExample {
                    features: e.features.clone(),
                    target: s.z_hat,
                }
            })
            .collect();
        soft_labels = soft;
        examples
    } else {
        Vec::new()
    };

    let hard_examples: Vec<CvrExample> = partition
        .hard
        .iter()
        .map(|e| CvrExample {
            features: e.features.clone(),
            target: f64::from(e.z),
        })
        .collect();

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seeding::derive(seed, tag::TRAIN);
    if let Some(n) = setting.stopping_override {
        train_cfg.stopping = Stopping::FixedEpochs { n };
    }
    let mut arch = cfg.arch.clone();
    arch.seed = seeding::derive(seed, tag::ARCH_INIT);

    let (params, trace) = if cfg.use_mtl && !soft_examples.is_empty() {
        train_mtl(&hard_examples, &soft_examples, &arch, &train_cfg)
    } else {
        train(&hard_examples, &soft_examples, &arch, &train_cfg)
    }
    .map_err(|e| e.in_stage("train"))?;

    let test_clicked: Vec<&LogRecord> = test.iter().filter(|r| r.y).collect();
    let scores: Vec<f64> = test_clicked
        .iter()
        .map(|r| forward(&params, &r.x))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("evaluate"))?;
    let labels: Vec<bool> = test_clicked.iter().map(|r| r.ground_truth_label()).collect();
    let pr = pr_auc(&scores, &labels).map_err(|e| e.in_stage("evaluate"))?;
    let cal = calibration_error(&scores, &labels, cfg.calibration_bins)
        .map_err(|e| e.in_stage("evaluate"))?;

    Ok(SettingRun {
        report: CellReport {
            setting: setting.kind,
            optin_rate: setting.optin_rate,
            seed,
            pr_auc: pr,
            calibration_error: cal,
            n_hard: hard_examples.len(),
            n_soft: soft_examples.len(),
            n_calibrated,
        },
        model: params,
        trace,
        imputer: fitted_imputer,
        soft_labels,
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregate per-cell reports into per-(setting, rate) means with standard
/// errors and NonPPCT-relative ratios. Fails without a NonPPCT baseline.
pub fn aggregate_cells(cells: &[CellReport]) -> Result<Vec<MetricsReport>> {
    let mut by_cell: BTreeMap<(SettingKind, u64), Vec<&CellReport>> = BTreeMap::new();
    for c in cells {
        by_cell
            .entry((c.setting, c.optin_rate.to_bits()))
            .or_default()
            .push(c);
    }
    if !by_cell.keys().any(|(k, _)| *k == SettingKind::NonPpct) {
        return Err(Error::config(
            "settings",
            "missing the non_ppct baseline; relative metrics are undefined",
        ));
    }
    let baseline: BTreeMap<u64, f64> = by_cell
        .iter()
        .filter(|((k, _), _)| *k == SettingKind::NonPpct)
        .map(|((_, rate), group)| {
            let (mean, _) = mean_and_se(&group.iter().map(|c| c.pr_auc).collect::<Vec<_>>());
            (*rate, mean)
        })
        .collect();

    let mut out = Vec::new();
    for ((kind, rate_bits), group) in &by_cell {
        let prs: Vec<f64> = group.iter().map(|c| c.pr_auc).collect();
        let cals: Vec<f64> = group.iter().map(|c| c.calibration_error).collect();
        let (pr_mean, pr_se) = mean_and_se(&prs);
        let (cal_mean, _) = mean_and_se(&cals);
        let base = baseline[rate_bits];
        out.push(MetricsReport {
            setting: *kind,
            optin_rate: f64::from_bits(*rate_bits),
            pr_auc: pr_mean,
            pr_auc_se: pr_se,
            relative_pr_auc: pr_mean / base,
            calibration_error: cal_mean,
            n_seeds: group.len(),
        });
    }
    out.sort_by(|a, b| {
        (a.setting, a.optin_rate.to_bits()).cmp(&(b.setting, b.optin_rate.to_bits()))
    });
    Ok(out)
}

/// Sweep the (setting, rate) grid over `n_seeds` seeds. Seeds run in
/// parallel; every cell is internally deterministic, so the output is
/// independent of thread count. Settings whose partition ignores the
/// opt-in rate are computed once per seed and replicated across rates.
pub fn optin_sweep(
    rates: &[f64],
    settings: &[SettingSpec],
    n_seeds: usize,
    gen: &GenConfig,
    cfg: &PipelineConfig,
) -> Result<SweepOutput> {
    gen.validate()?;
    cfg.validate()?;
    if n_seeds < 2 {
        return Err(Error::config("n_seeds", "need >= 2 seeds for standard errors"));
    }
    if rates.is_empty() {
        return Err(Error::config("rates", "need at least one opt-in rate"));
    }
    for r in rates {
        if !(0.0..=1.0).contains(r) {
            return Err(Error::config("rates", format!("rate {r} not in [0, 1]")));
        }
    }
    if rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("rates", "must be sorted ascending"));
    }
    if !settings.iter().any(|s| s.kind == SettingKind::NonPpct) {
        return Err(Error::config(
            "settings",
            "missing the non_ppct baseline; relative metrics are undefined",
        ));
    }

    let seed_results: Vec<std::result::Result<Vec<CellReport>, SeedFailure>> = (0..n_seeds
        as u64)
        .into_par_iter()
        .map(|i| run_one_seed(i, rates, settings, gen, cfg))
        .collect();

    let mut cells = Vec::new();
    let mut failure: Option<(String, Error)> = None;
    for r in seed_results {
        match r {
            Ok(mut seed_cells) => cells.append(&mut seed_cells),
            Err(mut f) => {
                cells.append(&mut f.completed);
                failure.get_or_insert((f.stage, f.source));
            }
        }
    }
    cells.sort_by(|a, b| {
        (a.setting, a.optin_rate.to_bits(), a.seed).cmp(&(
            b.setting,
            b.optin_rate.to_bits(),
            b.seed,
        ))
    });
    if let Some((stage, source)) = failure {
        return Err(Error::SweepFailed {
            stage,
            source: Box::new(source),
            completed: cells,
        });
    }
    let aggregated = aggregate_cells(&cells)?;
    Ok(SweepOutput { cells, aggregated })
}

struct SeedFailure {
    stage: String,
    source: Error,
    /// Cells this seed completed before the failure.
    completed: Vec<CellReport>,
}

fn run_one_seed(
    seed_index: u64,
    rates: &[f64],
    settings: &[SettingSpec],
    gen: &GenConfig,
    cfg: &PipelineConfig,
) -> std::result::Result<Vec<CellReport>, SeedFailure> {
    let data_seed = seeding::derive2(gen.seed, tag::SWEEP_SEED, seed_index);
    // Fresh samples per seed from one fixed ground-truth world.
    let gen_i = GenConfig {
        seed: data_seed,
        world_seed: Some(gen.world_seed.unwrap_or(gen.seed)),
        ..gen.clone()
    };
    let mut cells = Vec::new();
    let fail = |stage: String, source: Error, completed: &mut Vec<CellReport>| SeedFailure {
        stage,
        source,
        completed: std::mem::take(completed),
    };
    let records = match generate_logs(&gen_i) {
        Ok(r) => r,
        Err(e) => return Err(fail("generate".into(), e, &mut cells)),
    };
    let optin_seed = seeding::derive(data_seed, tag::OPTIN);

    let mut rate_invariant_cache: BTreeMap<SettingKind, CellReport> = BTreeMap::new();
    for &rate in rates {
        let assigned = match assign_optin(&records, rate, optin_seed) {
            Ok(a) => a,
            Err(e) => return Err(fail("optin".into(), e, &mut cells)),
        };
        for spec in settings {
            if !spec.kind.uses_optin_rate() {
                if let Some(cached) = rate_invariant_cache.get(&spec.kind) {
                    let mut cell = cached.clone();
                    cell.optin_rate = rate;
                    cells.push(cell);
                    continue;
                }
            }
            let setting = ExperimentSetting {
                kind: spec.kind,
                optin_rate: rate,
                stopping_override: spec.stopping_override,
            };
            let cell = match run_setting(&setting, &assigned, cfg, data_seed) {
                Ok(c) => c,
                Err(e) => {
                    return Err(fail(
                        format!("{} @ rate {rate}", spec.kind.slug()),
                        e,
                        &mut cells,
                    ))
                }
            };
            if !spec.kind.uses_optin_rate() {
                rate_invariant_cache.insert(spec.kind, cell.clone());
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Convenience constructor: sigmoid is re-exported for doctests and tests.
pub fn logistic(t: f64) -> f64 {
    sigmoid(t)
}
