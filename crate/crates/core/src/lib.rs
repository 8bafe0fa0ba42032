//! Simulator and training toolkit for conversion-rate prediction under
//! privacy-preserving conversion tracking (PPCT).
//!
//! Conversion tracking links an ad click on a source app to a purchase on a
//! target app. Privacy-preserving reporting replaces the per-user conversion
//! label with a delayed, anonymous, group-level count keyed by a few-bit
//! token. This crate provides the pieces to study CVR model training in that
//! regime, end to end on synthetic data with known ground truth:
//!
//! - [`datagen`]: click/conversion logs with platform cohorts, post-ranking
//!   signals, and per-user opt-in.
//! - [`protocol`]: group tokens, delayed anonymous callbacks, windowed
//!   aggregation into group labels, k-threshold suppression.
//! - [`imputer`]: post-ranking logistic regression, soft-label imputation,
//!   group-label calibration.
//! - [`model`]: the CVR MLP with mixed hard/soft cross-entropy training,
//!   early stopping, and a two-head MTL variant.
//! - [`eval`]: PR-AUC and calibration metrics, the five label-availability
//!   settings, and the opt-in-rate sweep with per-seed standard errors.
//! - [`config`] / [`io`]: the run-config file and all on-disk formats.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod imputer;
pub mod io;
pub mod model;
pub mod protocol;
pub mod seeding;

pub use config::{ArchConfig, RunConfig, SweepConfig};
pub use datagen::{
    assign_optin, generate_logs, partition_labels, GenConfig, HardExample, LabeledPartition,
    LogRecord, Platform, PostRankingSignals, RankingFeatures, UnlabeledExample,
};
pub use error::{Error, Result};
pub use eval::{
    aggregate_cells, calibration_error, impression_value, optin_sweep, pr_auc, run_setting,
    run_setting_full, split_train_test, CellReport, ExperimentSetting, MetricsReport,
    PipelineConfig, SettingKind, SettingRun, SettingSpec, SweepOutput, ALL_SETTINGS,
};
pub use imputer::{
    calibrate_soft_labels, fit_post_ranking_lr, impute_soft_labels, lr_loss_and_gradient,
    LrFitConfig, LrParams, SoftLabel,
};
pub use model::{
    forward, forward_soft, soft_xent_loss, train, train_mtl, Activation, CvrExample, MlpArch,
    ModelParams, Stopping, TrainConfig, TrainingTrace,
};
pub use protocol::{
    aggregate_group_labels, apply_count_noise, apply_suppression, assign_tokens, emit_callbacks,
    ConversionCallback, GroupKey, GroupLabel, GroupToken, GroupingPolicy, ProtocolConfig,
    TokenAssigner,
};
