//! Synthetic click/conversion log generation.
//!
//! Produces impression records with a known ground-truth conversion model so
//! every downstream stage can be evaluated against the truth. The generative
//! model is linear logits over independent standard-normal features with
//! per-cohort structure:
//!
//! - `x[0]` encodes the platform (-1 Android, +1 iOS) and `x[1]` the OS
//!   cohort (+1 for iOS <= 13, -1 otherwise); the remaining coordinates are
//!   iid N(0, 1). The cohort codes are the only way a ranking-time model can
//!   condition on platform, mirroring device features in production rankers.
//! - The click logit is shared across cohorts. The conversion logit uses a
//!   platform-specific weight vector on the normal coordinates plus
//!   `behavior_shift` for the iOS <= 13 cohort, so a model trained on one
//!   platform ranks the other poorly.
//! - Post-ranking signals for clicked rows are
//!   `x' = alpha * (2z - 1) * u + noise` with a fixed unit direction `u`,
//!   identical on every platform: their informativeness about `z` is
//!   controlled by one knob and transfers across cohorts.
//!
//! Generation is a pure function of `(config, seed)`; user streams are
//! independently seeded so sharding by user id cannot change the output.

use std::collections::BTreeSet;
use std::ops::Deref;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ExperimentSetting, SettingKind};
use crate::seeding::{self, tag};

/// Ranking-time feature view: the only features a CVR model may consume.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingFeatures(pub Vec<f64>);

impl Deref for RankingFeatures {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Post-ranking signal view: observed on the source app after the click,
/// usable for training-side imputation only.
#[derive(Debug, Clone, PartialEq)]
pub struct PostRankingSignals(pub Vec<f64>);

impl Deref for PostRankingSignals {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Android,
    Ios,
}

impl std::fmt::Display for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Platform::Android => write!(f, "android"),
            Platform::Ios => write!(f, "ios"),
        }
    }
}

/// Generator configuration. Every field has a default; see `Default`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Number of simulated users.
    pub n_users: usize,
    /// Number of ads; ad j promotes target app j.
    pub n_ads: usize,
    /// Ranking-feature dimensionality (includes the two cohort codes).
    pub dim_x: usize,
    /// Post-ranking signal dimensionality.
    pub dim_xp: usize,
    /// Base click logit.
    pub ctr_base_logit: f64,
    /// Base conversion logit (conditional on click).
    pub cvr_base_logit: f64,
    /// Norm of the click-logit weight vector.
    pub ctr_weight_scale: f64,
    /// Norm of each platform's conversion-logit weight vector.
    pub cvr_weight_scale: f64,
    /// How predictive x' is of z (alpha in the signal construction).
    pub xp_signal_strength: f64,
    /// Fraction of users on iOS.
    pub ios_fraction: f64,
    /// Fraction of iOS users on OS <= 13.
    pub ios_le13_fraction: f64,
    /// Conversion-logit offset for the iOS <= 13 cohort.
    pub behavior_shift: f64,
    /// Mean impressions per user (Poisson).
    pub mean_impressions_per_user: f64,
    /// Simulation horizon in hours; click times are integer hours in
    /// [0, horizon_h).
    pub horizon_h: f64,
    pub seed: u64,
    /// Seed for the ground-truth weight vectors. Defaults to `seed`; the
    /// sweep pins it so re-seeded runs sample fresh data from one fixed
    /// world instead of drawing a new world per seed.
    pub world_seed: Option<u64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 12000,
            n_ads: 5,
            dim_x: 16,
            dim_xp: 4,
            ctr_base_logit: -1.0,
            cvr_base_logit: -1.6,
            ctr_weight_scale: 1.0,
            cvr_weight_scale: 2.0,
            xp_signal_strength: 1.35,
            ios_fraction: 0.5,
            ios_le13_fraction: 0.085,
            behavior_shift: 1.0,
            mean_impressions_per_user: 3.0,
            horizon_h: 720.0,
            seed: 17,
            world_seed: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::config(name, format!("{v} not in [0, 1]")))
            } else {
                Ok(())
            }
        };
        frac("ios_fraction", self.ios_fraction)?;
        frac("ios_le13_fraction", self.ios_le13_fraction)?;
        if self.dim_x < 1 {
            return Err(Error::config("dim_x", "must be >= 1"));
        }
        if self.dim_xp < 1 {
            return Err(Error::config("dim_xp", "must be >= 1"));
        }
        if self.n_ads < 1 {
            return Err(Error::config("n_ads", "must be >= 1"));
        }
        if self.xp_signal_strength < 0.0 {
            return Err(Error::config("xp_signal_strength", "must be >= 0"));
        }
        if self.ctr_weight_scale < 0.0 {
            return Err(Error::config("ctr_weight_scale", "must be >= 0"));
        }
        if self.cvr_weight_scale < 0.0 {
            return Err(Error::config("cvr_weight_scale", "must be >= 0"));
        }
        if self.behavior_shift < 0.0 {
            return Err(Error::config("behavior_shift", "must be >= 0"));
        }
        if self.mean_impressions_per_user < 0.0 {
            return Err(Error::config("mean_impressions_per_user", "must be >= 0"));
        }
        if !(self.horizon_h > 0.0) {
            return Err(Error::config("horizon_h", "must be > 0"));
        }
        Ok(())
    }
}

/// One impression. Clicked impressions (`y = true`) carry post-ranking
/// signals and a conversion outcome; unclicked impressions never convert.
///
/// The conversion label and its generating probability are simulator-side
/// ground truth: they are not public fields, and the trainer-facing types
/// built by [`partition_labels`] carry the label only for the hard
/// partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub record_id: u64,
    pub user_id: u64,
    pub x: RankingFeatures,
    /// Present iff the impression was clicked.
    pub x_prime: Option<PostRankingSignals>,
    /// Click label.
    pub y: bool,
    pub(crate) z: bool,
    pub(crate) z_true_prob: f64,
    pub platform: Platform,
    pub os_version: u32,
    pub target_app: u32,
    pub opted_in: bool,
    /// Integer hours from simulation start.
    pub click_time: f64,
}

impl LogRecord {
    /// Ground-truth conversion label. Simulator privilege: reporting
    /// channels and evaluation only, never a training input for records
    /// outside the hard partition.
    pub fn ground_truth_label(&self) -> bool {
        self.z
    }

    /// Ground-truth conversion probability (NaN for records loaded from
    /// disk, which do not carry it).
    pub fn ground_truth_prob(&self) -> f64 {
        self.z_true_prob
    }

    /// Rebuild a record from exported fields (no ground-truth probability).
    pub(crate) fn from_export(
        record_id: u64,
        user_id: u64,
        platform: Platform,
        os_version: u32,
        target_app: u32,
        opted_in: bool,
        click_time: f64,
        y: bool,
        z: bool,
        x: Vec<f64>,
        x_prime: Option<Vec<f64>>,
    ) -> Self {
        LogRecord {
            record_id,
            user_id,
            x: RankingFeatures(x),
            x_prime: x_prime.map(PostRankingSignals),
            y,
            z,
            z_true_prob: f64::NAN,
            platform,
            os_version,
            target_app,
            opted_in,
            click_time,
        }
    }

    fn is_ios_le13(&self) -> bool {
        self.platform == Platform::Ios && self.os_version <= 13
    }
}

/// A clicked example with an individual conversion label.
#[derive(Debug, Clone)]
pub struct HardExample {
    pub record_id: u64,
    pub features: RankingFeatures,
    pub signals: PostRankingSignals,
    pub z: bool,
}

/// A clicked example whose conversion label is withheld. The type carries
/// no label field at all.
#[derive(Debug, Clone)]
pub struct UnlabeledExample {
    pub record_id: u64,
    pub features: RankingFeatures,
    pub signals: PostRankingSignals,
}

/// Disjoint split of the clicked subset into individually labeled and
/// unlabeled examples.
#[derive(Debug, Clone, Default)]
pub struct LabeledPartition {
    pub hard: Vec<HardExample>,
    pub unlabeled: Vec<UnlabeledExample>,
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Ground-truth weight vectors, derived from the config seed.
struct TruthWeights {
    ctr: Vec<f64>,
    cvr_android: Vec<f64>,
    cvr_ios: Vec<f64>,
    signal_dir: Vec<f64>,
}

fn unit_normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|a| a / norm).collect()
}

fn truth_weights(config: &GenConfig) -> TruthWeights {
    let world = config.world_seed.unwrap_or(config.seed);
    let mut rng = seeding::rng(world, tag::GEN_WEIGHTS);
    let dim_rand = config.dim_x.saturating_sub(2);
    let scale = |v: Vec<f64>, s: f64| v.into_iter().map(|a| a * s).collect::<Vec<_>>();
    let ctr = scale(unit_normal_vec(&mut rng, dim_rand), config.ctr_weight_scale);
    let cvr_android = scale(unit_normal_vec(&mut rng, dim_rand), config.cvr_weight_scale);
    let cvr_ios = scale(unit_normal_vec(&mut rng, dim_rand), config.cvr_weight_scale);
    let signal_dir = unit_normal_vec(&mut rng, config.dim_xp);
    TruthWeights {
        ctr,
        cvr_android,
        cvr_ios,
        signal_dir,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generate the full impression log. Pure in `(config, seed)`: per-user
/// streams are derived from `(seed, user_id)`, so the output is identical
/// however users are sharded.
pub fn generate_logs(config: &GenConfig) -> Result<Vec<LogRecord>> {
    config.validate()?;
    let weights = truth_weights(config);
    let mut records = Vec::new();
    for user_id in 0..config.n_users as u64 {
        generate_user(config, &weights, user_id, &mut records);
    }
    Ok(records)
}

fn generate_user(
    config: &GenConfig,
    weights: &TruthWeights,
    user_id: u64,
    out: &mut Vec<LogRecord>,
) {
    let mut rng = seeding::rng2(config.seed, tag::GEN_USER, user_id);
    let platform = if rng.gen::<f64>() < config.ios_fraction {
        Platform::Ios
    } else {
        Platform::Android
    };
    let os_version = match platform {
        Platform::Ios => {
            if rng.gen::<f64>() < config.ios_le13_fraction {
                rng.gen_range(11..=13)
            } else {
                rng.gen_range(14..=17)
            }
        }
        Platform::Android => rng.gen_range(10..=14),
    };
    let n_impressions = if config.mean_impressions_per_user > 0.0 {
        let poisson = Poisson::new(config.mean_impressions_per_user).expect("validated > 0");
        poisson.sample(&mut rng) as u64
    } else {
        0
    };

    let dim_rand = config.dim_x.saturating_sub(2);
    let ios_le13 = platform == Platform::Ios && os_version <= 13;
    let platform_code = match platform {
        Platform::Android => -1.0,
        Platform::Ios => 1.0,
    };
    let cohort_code = if ios_le13 { 1.0 } else { -1.0 };
    let cvr_w = match platform {
        Platform::Android => &weights.cvr_android,
        Platform::Ios => &weights.cvr_ios,
    };

    for k in 0..n_impressions {
        let click_time = rng.gen_range(0..config.horizon_h.ceil() as u64) as f64;
        let target_app = rng.gen_range(0..config.n_ads as u32);
        let x_rand: Vec<f64> = (0..dim_rand)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut x = Vec::with_capacity(config.dim_x);
        x.push(platform_code);
        if config.dim_x >= 2 {
            x.push(cohort_code);
        }
        x.extend_from_slice(&x_rand);
        x.truncate(config.dim_x);

        let ctr_logit = config.ctr_base_logit + dot(&weights.ctr, &x_rand);
        let y = rng.gen::<f64>() < sigmoid(ctr_logit);

        let (z, z_true_prob, x_prime) = if y {
            let mut cvr_logit = config.cvr_base_logit + dot(cvr_w, &x_rand);
            if ios_le13 {
                cvr_logit += config.behavior_shift;
            }
            let p = sigmoid(cvr_logit);
            let z = rng.gen::<f64>() < p;
            let sign = if z { 1.0 } else { -1.0 };
            let xp: Vec<f64> = weights
                .signal_dir
                .iter()
                .map(|&u| {
                    config.xp_signal_strength * sign * u + rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            (z, p, Some(PostRankingSignals(xp)))
        } else {
            // No click, no conversion, no post-ranking interaction.
            (false, 0.0, None)
        };

        out.push(LogRecord {
            record_id: (user_id << 20) | k,
            user_id,
            x: RankingFeatures(x),
            x_prime,
            y,
            z,
            z_true_prob,
            platform,
            os_version,
            target_app,
            opted_in: false,
            click_time,
        });
    }
}

/// Re-draw the iOS opt-in flags at the given rate. Opt-in is a per-user
/// property: every record of a user shares the flag. The per-user draw is
/// a fixed uniform compared against the rate, so opted-in user sets are
/// nested across rates for the same seed.
pub fn assign_optin(records: &[LogRecord], optin_rate: f64, seed: u64) -> Result<Vec<LogRecord>> {
    if !(0.0..=1.0).contains(&optin_rate) {
        return Err(Error::config(
            "optin_rate",
            format!("{optin_rate} not in [0, 1]"),
        ));
    }
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.opted_in = r.platform == Platform::Ios
                && seeding::unit_f64(seed, tag::OPTIN, r.user_id) < optin_rate;
            r
        })
        .collect())
}

/// Split the clicked subset of `records` into hard-labeled and unlabeled
/// examples according to the experiment setting's label-availability rule.
pub fn partition_labels(
    records: &[LogRecord],
    setting: &ExperimentSetting,
) -> Result<LabeledPartition> {
    let mut partition = LabeledPartition::default();
    for r in records.iter().filter(|r| r.y) {
        let signals = r
            .x_prime
            .as_ref()
            .ok_or(Error::MissingSignal(r.record_id))?
            .clone();
        let hard = match setting.kind {
            SettingKind::NonPpct => true,
            SettingKind::AndroidOnly => r.platform == Platform::Android,
            SettingKind::AndroidPlusIosLe13 => {
                r.platform == Platform::Android || r.is_ios_le13()
            }
            SettingKind::OptInOnly | SettingKind::PostRankingSignals => {
                r.platform == Platform::Android || r.is_ios_le13() || r.opted_in
            }
        };
        if hard {
            partition.hard.push(HardExample {
                record_id: r.record_id,
                features: r.x.clone(),
                signals,
                z: r.z,
            });
        } else {
            partition.unlabeled.push(UnlabeledExample {
                record_id: r.record_id,
                features: r.x.clone(),
                signals,
            });
        }
    }
    Ok(partition)
}

/// Record ids of a partition side, for membership bookkeeping.
pub fn unlabeled_ids(partition: &LabeledPartition) -> BTreeSet<u64> {
    partition.unlabeled.iter().map(|e| e.record_id).collect()
}
