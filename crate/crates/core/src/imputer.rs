//! Soft-label imputation from post-ranking signals.
//!
//! A logistic regression is fit on the hard-labeled examples using only the
//! post-ranking signals (a deliberately small feature set), then used to
//! impute a conversion probability for every unlabeled example. Group labels
//! from the reporting channel can calibrate the imputed labels: per group, a
//! shared additive logit shift is solved so the imputed labels sum to the
//! reported conversion count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{sigmoid, HardExample, PostRankingSignals, UnlabeledExample};
use crate::error::{Error, Result};
use crate::protocol::{GroupKey, GroupLabel};

/// Soft labels are kept inside [EPS, 1 - EPS] so they can always enter a
/// log-loss.
pub const EPS: f64 = 1e-6;

/// Logit-shift cap for saturating calibration targets (g = 0 or g = group
/// size, which no finite shift can meet exactly).
const SHIFT_CAP: f64 = 30.0;

/// Bisection tolerance on the calibrated sum.
const CALIBRATION_TOL: f64 = 1e-6;

/// Logistic-regression parameters over post-ranking signals. The weight
/// vector has one entry per signal coordinate plus a trailing bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LrParams {
    pub w: Vec<f64>,
    pub l2: f64,
}

impl LrParams {
    pub fn zeros(dim_xp: usize, l2: f64) -> Self {
        LrParams {
            w: vec![0.0; dim_xp + 1],
            l2,
        }
    }

    /// Model logit for one signal vector.
    pub fn logit(&self, signals: &PostRankingSignals) -> Result<f64> {
        if signals.len() + 1 != self.w.len() {
            return Err(Error::Shape {
                context: "post-ranking logit",
                expected: self.w.len() - 1,
                got: signals.len(),
            });
        }
        let bias = self.w[self.w.len() - 1];
        Ok(signals.iter().zip(&self.w).map(|(x, w)| x * w).sum::<f64>() + bias)
    }
}

/// Optimizer settings for [`fit_post_ranking_lr`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrFitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the gradient 2-norm falls below this.
    pub grad_tol: f64,
    pub l2: f64,
    /// Permit an all-one-class fit, returning a bias-only model.
    pub allow_degenerate: bool,
    /// Optional warm start; zeros otherwise.
    pub init: Option<Vec<f64>>,
}

impl Default for LrFitConfig {
    fn default() -> Self {
        LrFitConfig {
            learning_rate: 1.0,
            max_iters: 5000,
            grad_tol: 1e-7,
            l2: 1e-4,
            allow_degenerate: false,
            init: None,
        }
    }
}

/// An imputed conversion probability for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub record_id: u64,
    pub z_hat: f64,
    pub calibrated: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Mean negative log-likelihood plus an l2 penalty (bias excluded), and its
/// exact gradient.
pub fn lr_loss_and_gradient(
    params: &LrParams,
    batch: &[(PostRankingSignals, bool)],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let dim = params.w.len() - 1;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.w.len()];
    for (signals, z) in batch {
        let t = params.logit(signals)?;
        // -z ln s(t) - (1-z) ln(1-s(t)) via softplus for stability.
        loss += if *z { softplus(-t) } else { softplus(t) };
        let residual = sigmoid(t) - f64::from(*z);
        for (g, x) in grad.iter_mut().zip(signals.iter()) {
            *g += residual * x;
        }
        grad[dim] += residual;
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    for j in 0..dim {
        loss += 0.5 * params.l2 * params.w[j] * params.w[j];
        grad[j] += params.l2 * params.w[j];
    }
    Ok((loss, grad))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Fit the post-ranking logistic regression on hard-labeled examples by
/// full-batch gradient descent with per-coordinate curvature scaling and a
/// deterministic step-halving line search. Rows are summed in record-id
/// order, so any permutation of the input fits to bit-identical parameters.
/// Only the post-ranking signals are consumed; the ranking features never
/// enter.
pub fn fit_post_ranking_lr(hard: &[HardExample], cfg: &LrFitConfig) -> Result<LrParams> {
    if hard.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let dim = hard[0].signals.len();
    let mut rows: Vec<&HardExample> = hard.iter().collect();
    rows.sort_by_key(|e| e.record_id);
    let batch: Vec<(PostRankingSignals, bool)> = rows
        .iter()
        .map(|e| (e.signals.clone(), e.z))
        .collect();
    let positives = batch.iter().filter(|(_, z)| *z).count();
    if positives == 0 || positives == batch.len() {
        if !cfg.allow_degenerate {
            return Err(Error::DegenerateLabels(format!(
                "{positives} positives in {} rows; need both classes",
                batch.len()
            )));
        }
        let rate = (positives as f64 / batch.len() as f64).clamp(EPS, 1.0 - EPS);
        let mut params = LrParams::zeros(dim, cfg.l2);
        *params.w.last_mut().unwrap() = (rate / (1.0 - rate)).ln();
        return Ok(params);
    }

    let mut params = match &cfg.init {
        Some(w) => {
            if w.len() != dim + 1 {
                return Err(Error::Shape {
                    context: "lr init",
                    expected: dim + 1,
                    got: w.len(),
                });
            }
            LrParams {
                w: w.clone(),
                l2: cfg.l2,
            }
        }
        None => LrParams::zeros(dim, cfg.l2),
    };

    // Per-coordinate curvature bounds: mean x_j^2 / 4 + l2 for weights,
    // 1/4 for the unregularized bias. Scaling steps by the inverse keeps
    // the descent stable even when l2 dwarfs the data curvature.
    let n = batch.len() as f64;
    let mut curvature = vec![0.0; dim + 1];
    for (signals, _) in &batch {
        for (c, x) in curvature.iter_mut().zip(signals.iter()) {
            *c += x * x;
        }
    }
    for c in curvature.iter_mut().take(dim) {
        *c = *c / (4.0 * n) + cfg.l2;
    }
    curvature[dim] = 0.25;

    let mut step = cfg.learning_rate;
    let (mut loss, mut grad) = lr_loss_and_gradient(&params, &batch)?;
    for _ in 0..cfg.max_iters {
        if norm2(&grad) <= cfg.grad_tol {
            break;
        }
        // Halve the step until the full-batch loss does not increase.
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = params
                .w
                .iter()
                .zip(&grad)
                .zip(&curvature)
                .map(|((w, g), c)| w - step * g / c)
                .collect();
            let trial_params = LrParams {
                w: trial,
                l2: cfg.l2,
            };
            let (trial_loss, trial_grad) = lr_loss_and_gradient(&trial_params, &batch)?;
            if trial_loss <= loss {
                params = trial_params;
                loss = trial_loss;
                grad = trial_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // step underflow; loss cannot be reduced further
        }
        step = (step * 1.1).min(cfg.learning_rate * 16.0);
    }
    Ok(params)
}

/// Impute a soft label for every unlabeled example: z_hat = s(x' . w*),
/// clamped into [EPS, 1 - EPS].
pub fn impute_soft_labels(
    unlabeled: &[UnlabeledExample],
    params: &LrParams,
) -> Result<Vec<SoftLabel>> {
    unlabeled
        .iter()
        .map(|e| {
            let t = params.logit(&e.signals)?;
            Ok(SoftLabel {
                record_id: e.record_id,
                z_hat: sigmoid(t).clamp(EPS, 1.0 - EPS),
                calibrated: false,
            })
        })
        .collect()
}

fn logit_of(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Calibrate soft labels against group labels: per unsuppressed group, find
/// the shared additive logit shift whose shifted labels sum to the group's
/// reported conversion count (bisection to 1e-6 on the sum). A shared shift
/// is strictly monotone, so within-group ordering is preserved. Saturating
/// targets (0 or the full group) cap the shift at +/-30 with a warning.
/// Members of suppressed groups pass through unchanged.
pub fn calibrate_soft_labels(
    soft: &[SoftLabel],
    membership: &BTreeMap<u64, GroupKey>,
    groups: &[GroupLabel],
) -> Result<Vec<SoftLabel>> {
    let by_key: BTreeMap<GroupKey, &GroupLabel> = groups.iter().map(|g| (g.key(), g)).collect();
    let mut members: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (idx, label) in soft.iter().enumerate() {
        let key = membership
            .get(&label.record_id)
            .ok_or(Error::MissingMembership(label.record_id))?;
        if !by_key.contains_key(key) {
            return Err(Error::MissingGroup {
                target_app: key.target_app,
                token: key.token,
                window: key.window_index,
            });
        }
        members.entry(*key).or_default().push(idx);
    }

    let mut out = soft.to_vec();
    for (key, indices) in &members {
        let group = by_key[key];
        if group.suppressed {
            continue;
        }
        let size = indices.len();
        let target = group.conversions;
        if target > size as u64 {
            return Err(Error::InfeasibleTarget {
                target_app: key.target_app,
                token: key.token,
                window: key.window_index,
                target,
                size,
            });
        }
        let logits: Vec<f64> = indices.iter().map(|&i| logit_of(soft[i].z_hat)).collect();
        let shift = solve_shift(&logits, target as f64, key);
        for (&i, &l) in indices.iter().zip(&logits) {
            out[i].z_hat = sigmoid(l + shift).clamp(EPS, 1.0 - EPS);
            out[i].calibrated = true;
        }
    }
    Ok(out)
}

/// Solve sum_i s(l_i + shift) = target for the shift, by bisection on
/// [-SHIFT_CAP, SHIFT_CAP]. The summands carry the same [EPS, 1 - EPS]
/// clamp as the stored labels, so the solved sum is exactly the stored
/// sum; the clamped sum is still monotone in the shift.
fn solve_shift(logits: &[f64], target: f64, key: &GroupKey) -> f64 {
    let sum_at = |shift: f64| {
        logits
            .iter()
            .map(|&l| sigmoid(l + shift).clamp(EPS, 1.0 - EPS))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (-SHIFT_CAP, SHIFT_CAP);
    if sum_at(lo) >= target {
        if sum_at(lo) - target > CALIBRATION_TOL {
            log::warn!(
                "group ({}, token {}, window {}): target {target} saturates; shift capped at {}",
                key.target_app,
                key.token,
                key.window_index,
                -SHIFT_CAP
            );
        }
        return lo;
    }
    if sum_at(hi) <= target {
        if target - sum_at(hi) > CALIBRATION_TOL {
            log::warn!(
                "group ({}, token {}, window {}): target {target} saturates; shift capped at {}",
                key.target_app,
                key.token,
                key.window_index,
                SHIFT_CAP
            );
        }
        return hi;
    }
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let s = sum_at(mid);
        if (s - target).abs() <= CALIBRATION_TOL {
            break;
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}
