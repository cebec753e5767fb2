//! Age-binned error tables and table formatting helpers.

use serde::{Deserialize, Serialize};

use super::metrics::MetricResult;
use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mae: Option<f64>,
    /// Bin MAE divided by the largest bin MAE.
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub width: f64,
    pub bins: Vec<AgeBin>,
}

/// Per-bin MAE over `[min(truth), max(truth)]` in bins of `width` years,
/// each bin half-open except that the maximum lands in the last bin.
pub fn binned_mae(pred: &[f64], truth: &[f64], width: f64) -> Result<BinTable> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::Config(format!("bin width {width} must be positive")));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape("predictions and ages differ in length".into()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("binned_mae".into()));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("binned_mae input".into()));
    }
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_bins = ((hi - lo) / width).floor() as usize + 1;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (p, t) in pred.iter().zip(truth) {
        let b = (((t - lo) / width).floor() as usize).min(n_bins - 1);
        sums[b] += (p - t).abs();
        counts[b] += 1;
    }
    let maes: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let max = maes.iter().flatten().copied().fold(0.0, f64::max);
    let bins = (0..n_bins)
        .map(|b| AgeBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count: counts[b],
            mae: maes[b],
            normalized: maes[b].map(|m| if max > 0.0 { m / max } else { 1.0 }),
        })
        .collect();
    Ok(BinTable { width, bins })
}

/// Whether a standard error is too large for the compact notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeLimit {
    /// Age MAE: out of range when SE >= 1.0.
    Mae,
    /// AUROC: out of range when SE >= 0.01.
    Auc,
}

impl SeLimit {
    fn limit(self) -> f64 {
        match self {
            SeLimit::Mae => 1.0,
            SeLimit::Auc => 0.01,
        }
    }
}

/// Compact "mean(SE)" cell: the mean to three decimals and the SE's first
/// four decimal digits with leading zeros collapsed to a single zero, so
/// 7.880 with SE 0.0028 becomes `7.880(028)` and 0.939 with SE 0.0006
/// becomes `0.939(06)`. Out-of-range SEs print as `(*)`.
pub fn format_mean_se(mean: f64, se: f64, limit: SeLimit) -> String {
    if !(se.is_finite() && se >= 0.0) || se >= limit.limit() {
        return format!("{mean:.3}(*)");
    }
    let units = (se * 1e4).round() as u64;
    let digits = format!("{units:04}");
    let trimmed = digits.trim_start_matches('0');
    let se_txt = if trimmed.len() < digits.len() {
        format!("0{trimmed}")
    } else {
        digits
    };
    format!("{mean:.3}({se_txt})")
}

pub fn format_p(p: f64) -> String {
    if p < 1e-4 {
        "<0.0001".to_string()
    } else {
        format!("{p:.4}")
    }
}

pub const CSV_HEADER: &str = "metric,value,lo,hi,se,n";

/// One `metric,value,lo,hi,se,n` row.
pub fn csv_row(m: &MetricResult) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{}",
        m.name, m.value, m.lo, m.hi, m.se, m.n
    )
}
