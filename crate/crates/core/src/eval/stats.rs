//! Paired and multi-group hypothesis tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::metrics::midranks;
use crate::error::{Error, Result};

/// Largest sample size for which the signed-rank null is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 12;

fn two_sided_normal_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.sf(z.abs())).min(1.0)
}

/// Sum of `t^3 - t` over groups of tied values.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        sum += t * t * t - t;
        i = j + 1;
    }
    sum
}

/// Non-zero differences with the midranks of their magnitudes, `|W+ - E[W+]|`
/// and `E[W+]`.
fn signed_ranks(diffs: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon differences".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::AllZero);
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&nz).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let center = ranks.iter().sum::<f64>() / 2.0;
    Ok((abs, ranks, (w_plus - center).abs(), center))
}

/// Two-sided p by enumerating all sign assignments of the (mid)ranks.
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<f64> {
    let (_, ranks, observed, center) = signed_ranks(diffs)?;
    let n = ranks.len();
    if n > 24 {
        return Err(Error::OutOfRange(format!("exact signed-rank null for n = {n}")));
    }
    let mut extreme = 0u64;
    for mask in 0u32..(1u32 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - center).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / (1u64 << n) as f64)
}

/// Two-sided p from the normal approximation with tie and continuity
/// corrections.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<f64> {
    let (abs, _, observed, _) = signed_ranks(diffs)?;
    let nf = abs.len() as f64;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&abs) / 48.0;
    if var <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let z = (observed - 0.5).max(0.0) / var.sqrt();
    Ok(two_sided_normal_p(z))
}

/// Two-sided Wilcoxon signed-rank p-value for paired differences.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX`] remaining
/// differences the null distribution is enumerated, above that the normal
/// approximation is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<f64> {
    let n = diffs.iter().filter(|&&d| d != 0.0).count();
    if n <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(diffs)
    } else {
        wilcoxon_normal(diffs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub df: usize,
}

/// Kruskal-Wallis H with tie correction; p from the chi-square tail.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} group(s); Kruskal-Wallis needs at least 2",
            groups.len()
        )));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Empty("Kruskal-Wallis group".into()));
    }
    let all: Vec<f64> = groups.concat();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kruskal-Wallis values".into()));
    }
    let df = groups.len() - 1;
    let n = all.len() as f64;
    let ranks = midranks(&all);
    let mut offset = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        offset += g.len();
    }
    let correction = 1.0 - tie_term(&all) / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, df });
    }
    let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    Ok(KruskalWallis {
        h,
        p: chi.sf(h),
        df,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

/// Placement values: for each positive, the fraction of negatives it
/// outscores (ties count half); for each negative, the fraction of
/// positives that outscore it.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let v10 = (0..m).map(|i| (r_all[i] - r_pos[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (r_all[m + j] - r_neg[j]) / m as f64).collect();
    (v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong test for two correlated AUROCs computed on the same samples.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLong> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::Shape("paired scores and labels differ in length".into()));
    }
    if scores_a.iter().chain(scores_b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("DeLong scores".into()));
    }
    let m = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    if m < 2 || n < 2 {
        return Err(Error::Insufficient("DeLong needs two samples per class".into()));
    }
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let auc_a = a10.iter().sum::<f64>() / m as f64;
    let auc_b = b10.iter().sum::<f64>() / m as f64;
    let s10 = cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10);
    let s01 = cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01);
    let var = s10 / m as f64 + s01 / n as f64;
    if !(var > 1e-15) {
        return Err(Error::DegenerateVariance);
    }
    let z = (auc_a - auc_b) / var.sqrt();
    Ok(DeLong {
        auc_a,
        auc_b,
        z,
        p: two_sided_normal_p(z),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_examples() {
        let p = wilcoxon_signed_rank(&[0.3, 1.2, 0.1, 2.0, 0.7]).unwrap();
        assert!((p - 0.0625).abs() < 1e-15);
        assert_eq!(wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0]).unwrap(), 1.0);
        assert!(matches!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(Error::AllZero)));
    }

    #[test]
    fn kruskal_examples() {
        let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        assert!((kw.h - 7.2).abs() < 1e-12);
        assert_eq!(kw.df, 2);
        let same = kruskal_wallis(&[vec![2.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!((same.h, same.p), (0.0, 1.0));
        assert!(kruskal_wallis(&[vec![1.0]]).is_err());
    }

    #[test]
    fn delong_examples() {
        let labels: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let s: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        assert!(matches!(delong_test(&s, &s, &labels), Err(Error::DegenerateVariance)));
        let t: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).cos() + if i % 2 == 0 { 0.5 } else { 0.0 }).collect();
        let ab = delong_test(&s, &t, &labels).unwrap();
        let ba = delong_test(&t, &s, &labels).unwrap();
        assert!((ab.p - ba.p).abs() < 1e-15);
    }
}
