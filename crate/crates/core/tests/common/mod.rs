//! Shared test oracles and statistics helpers.

/// Exhaustive-threshold PR-AUC oracle: for every distinct score value,
/// recompute precision and recall from scratch over the whole input, then
/// step-integrate precision over recall in descending-threshold order.
/// Independent of the library's incremental implementation.
pub fn pr_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    assert!(pos > 0 && (pos as usize) < labels.len());
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0u64;
        let mut fp = 0u64;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    auc
}

/// Mean and standard error (sample std / sqrt(n)) of a series.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Pooled standard error of a difference of two independent-series means.
#[allow(dead_code)] // used by the acceptance target, not every test target
pub fn pooled_se(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_se(a);
    let (_, sb) = mean_se(b);
    (sa * sa + sb * sb).sqrt()
}
