//! Uncertainty evaluation metrics.
//!
//! Ties are always resolved explicitly (mid-ranks, grouped thresholds, or
//! stable input order) so results do not depend on sort internals.

use crate::error::{Error, Result};

/// One scored prediction. `label` marks the positive class for AUC/AUPR
/// (misclassified or out-of-distribution); `error` feeds the risk and
/// regression metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub error: f64,
}

impl ScoredSample {
    pub fn labeled(score: f64, label: bool) -> Self {
        Self {
            score,
            label,
            error: if label { 1.0 } else { 0.0 },
        }
    }

    pub fn with_error(score: f64, error: f64) -> Self {
        Self {
            score,
            label: error > 0.0,
            error,
        }
    }
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    if samples.iter().any(|s| !s.score.is_finite() || !s.error.is_finite()) {
        return Err(Error::invalid("scores and errors must be finite"));
    }
    Ok(())
}

/// 1-based ranks with tied values sharing the mean of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(score+ > score-) + P(tie) / 2`.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let pos = samples.iter().filter(|s| s.label).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both positive and negative samples"));
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ranks = mid_ranks(&scores);
    let rank_sum: f64 = samples.iter().zip(&ranks).filter(|(s, _)| s.label).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: step-wise area under the precision–recall curve over
/// descending score thresholds, with tied scores forming one threshold.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let pos = samples.iter().filter(|s| s.label).count();
    if pos == 0 {
        return Err(Error::invalid("aupr needs at least one positive sample"));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].score;
        while i < order.len() && order[i].score == threshold {
            if order[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Area under the risk–coverage curve: samples sorted by ascending
/// uncertainty (stable), risk at coverage `i/n` is the mean error of the `i`
/// most confident samples, averaged over `i = 1..n`.
pub fn aurc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    if samples.is_empty() {
        return Err(Error::invalid("aurc of an empty sample"));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut cumulative = 0.0;
    let mut total = 0.0;
    for (i, s) in order.iter().enumerate() {
        cumulative += s.error;
        total += cumulative / (i + 1) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Product-moment correlation between scores and errors (single-pass
/// Welford accumulation).
pub fn pearson(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let xs: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.error).collect();
    correlation(&xs, &ys)
}

/// Pearson correlation of mid-ranks.
pub fn spearman(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let xs: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.error).collect();
    correlation(&mid_ranks(&xs), &mid_ranks(&ys))
}

fn correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 samples"));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean error after discarding the first `removed` entries of `order`.
fn remaining_means(errors: &[f64], order: &[usize], counts: &[usize]) -> Vec<f64> {
    let n = order.len();
    // suffix[i] = sum of errors of order[i..]
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + errors[order[i]];
    }
    counts.iter().map(|&c| suffix[c] / (n - c) as f64).collect()
}

/// Sparsification curves `(by_uncertainty, oracle)` at fractions
/// `i / steps`, `i = 0..steps`, both normalized by the full-sample mean error.
pub fn sparsification_curves(samples: &[ScoredSample], steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_finite(samples)?;
    let n = samples.len();
    if steps == 0 || n < steps {
        return Err(Error::invalid(format!("sparsification needs n >= steps ({n} < {steps})")));
    }
    let errors: Vec<f64> = samples.iter().map(|s| s.error).collect();
    let counts: Vec<usize> = (0..steps).map(|i| i * n / steps).collect();
    let descending = |key: &dyn Fn(usize) -> f64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
        idx
    };
    let by_score = descending(&|i| samples[i].score);
    let by_error = descending(&|i| samples[i].error);
    let mut curve = remaining_means(&errors, &by_score, &counts);
    let mut oracle = remaining_means(&errors, &by_error, &counts);
    let base = curve[0];
    if base > 0.0 {
        curve.iter_mut().for_each(|v| *v /= base);
        oracle.iter_mut().for_each(|v| *v /= base);
    }
    Ok((curve, oracle))
}

/// Area between the uncertainty sparsification curve and the oracle curve.
pub fn ause(samples: &[ScoredSample], steps: usize) -> Result<f64> {
    let (curve, oracle) = sparsification_curves(samples, steps)?;
    // Each oracle point is the smallest achievable remaining mean, so every
    // gap is >= 0 in exact arithmetic; clamping drops summation-order noise.
    Ok(curve.iter().zip(&oracle).map(|(c, o)| (c - o).max(0.0)).sum::<f64>() / steps as f64)
}

/// Uncertainty calibration error over `bins` equal-width bins spanning the
/// observed score range; a degenerate range uses a single bin.
pub fn uce(samples: &[ScoredSample], bins: usize) -> Result<f64> {
    check_finite(samples)?;
    let n = samples.len();
    if bins == 0 || n < bins {
        return Err(Error::invalid(format!("uce needs n >= bins ({n} < {bins})")));
    }
    let lo = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let bins = if width > 0.0 { bins } else { 1 };
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    for s in samples {
        let b = if bins == 1 {
            0
        } else {
            (((s.score - lo) / width * bins as f64) as usize).min(bins - 1)
        };
        sums[b].0 += 1;
        sums[b].1 += s.score;
        sums[b].2 += s.error;
    }
    Ok(sums
        .iter()
        .filter(|(count, _, _)| *count > 0)
        .map(|&(count, u, e)| {
            let c = count as f64;
            (c / n as f64) * (u / c - e / c).abs()
        })
        .sum())
}
