//! Embedding diagnostics: the cohort-identifiability probe and a 2-D PCA.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use super::metrics::auroc;
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::rng;

pub const PROBE_FOLDS: usize = 5;
pub const PROBE_MIN_PER_COHORT: usize = 30;
/// L2 penalty on the (standardized-feature) probe weights.
pub const PROBE_L2: f64 = 1.0;
const NEWTON_MAX_ITER: usize = 50;

fn check_rows(features: &[Vec<f32>]) -> Result<usize> {
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature rows must be non-empty and equally long".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    Ok(d)
}

/// Rows standardized by the mean and deviation of the rows in `fit`, with a
/// trailing constant column for the intercept.
fn design(features: &[Vec<f32>], fit: &[usize], rows: &[usize]) -> (Vec<f64>, usize) {
    let d = features[0].len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in fit {
        for (m, &x) in mean.iter_mut().zip(&features[i]) {
            *m += x as f64 / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in fit {
        for ((s, &x), m) in sd.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (x as f64 - m).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let cols = d + 1;
    let mut x = Vec::with_capacity(rows.len() * cols);
    for &i in rows {
        x.extend(features[i].iter().zip(&mean).zip(&sd).map(|((&v, m), s)| (v as f64 - m) / s));
        x.push(1.0);
    }
    (x, cols)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// L2-penalized logistic regression fitted by Newton's method; the last
/// column is an unpenalized intercept.
pub fn fit_logistic(x: &[f64], cols: usize, y: &[bool], l2: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let mut w = vec![0.0; cols];
    let mut scaled = vec![0.0; n * cols];
    let mut hess = vec![0.0; cols * cols];
    for _ in 0..NEWTON_MAX_ITER {
        let mut grad = vec![0.0; cols];
        for i in 0..n {
            let row = &x[i * cols..(i + 1) * cols];
            let p = sigmoid(row.iter().zip(&w).map(|(a, b)| a * b).sum());
            let r = p - if y[i] { 1.0 } else { 0.0 };
            let s = (p * (1.0 - p)).max(1e-12).sqrt();
            for j in 0..cols {
                grad[j] += r * row[j];
                scaled[i * cols + j] = s * row[j];
            }
        }
        f64::gemm(cols, n, cols, &scaled, true, &scaled, false, 0.0, &mut hess);
        for j in 0..cols {
            let pen = if j + 1 < cols { l2 } else { 1e-8 };
            grad[j] += pen * w[j];
            hess[j * cols + j] += pen;
        }
        let h = DMatrix::from_row_slice(cols, cols, &hess);
        let step = h
            .cholesky()
            .ok_or(Error::DegenerateVariance)?
            .solve(&DVector::from_vec(grad));
        let max_step = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (wj, sj) in w.iter_mut().zip(step.iter()) {
            *wj -= sj;
        }
        if max_step < 1e-9 {
            break;
        }
    }
    Ok(w)
}

/// Fold assignment stratified by `labels`: each class is shuffled and dealt
/// round-robin into `k` folds.
pub fn stratified_folds(labels: &[u16], k: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut fold = vec![0; labels.len()];
    for (c, mut idx) in by_class {
        idx.shuffle(&mut rng::stream(&[seed, 0x9e0b, c as u64]));
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

/// How well a one-vs-rest logistic probe recovers the cohort from the
/// embedding: macro-averaged AUROC of 5-fold out-of-fold scores.
pub fn cohort_probe(features: &[Vec<f32>], cohorts: &[u16], seed: u64) -> Result<f64> {
    if features.len() != cohorts.len() {
        return Err(Error::Shape("features and cohort ids differ in length".into()));
    }
    check_rows(features)?;
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &c in cohorts {
        *counts.entry(c).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Insufficient("probe needs at least two cohorts".into()));
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n < PROBE_MIN_PER_COHORT) {
        return Err(Error::Insufficient(format!(
            "cohort {c} has {n} samples, probe needs {PROBE_MIN_PER_COHORT}"
        )));
    }
    let classes: Vec<u16> = counts.keys().copied().collect();
    let fold = stratified_folds(cohorts, PROBE_FOLDS, seed);
    let mut oof = vec![vec![0.0; features.len()]; classes.len()];
    for f in 0..PROBE_FOLDS {
        let train: Vec<usize> = (0..features.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..features.len()).filter(|&i| fold[i] == f).collect();
        let (xtr, cols) = design(features, &train, &train);
        let (xte, _) = design(features, &train, &test);
        for (ci, &c) in classes.iter().enumerate() {
            let y: Vec<bool> = train.iter().map(|&i| cohorts[i] == c).collect();
            let w = fit_logistic(&xtr, cols, &y, PROBE_L2)?;
            for (r, &i) in test.iter().enumerate() {
                oof[ci][i] = xte[r * cols..(r + 1) * cols].iter().zip(&w).map(|(a, b)| a * b).sum();
            }
        }
    }
    let mut total = 0.0;
    for (ci, &c) in classes.iter().enumerate() {
        let labels: Vec<bool> = cohorts.iter().map(|&k| k == c).collect();
        total += auroc(&oof[ci], &labels)?;
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projection on the two leading principal components of the covariance.
/// Each component's sign is fixed so its largest-magnitude loading is positive.
pub fn pca2d(features: &[Vec<f32>]) -> Result<Pca2d> {
    if features.len() < 3 {
        return Err(Error::Insufficient("PCA needs at least 3 samples".into()));
    }
    let d = check_rows(features)?;
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x as f64 / n as f64;
        }
    }
    let centered: Vec<f64> = features
        .iter()
        .flat_map(|f| f.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect::<Vec<_>>())
        .collect();
    let mut cov = vec![0.0; d * d];
    f64::gemm(d, n, d, &centered, true, &centered, false, 0.0, &mut cov);
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 1e-24) {
        return Err(Error::DegenerateVariance);
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let component = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [component(0), component(1)];
    let explained = [
        eig.eigenvalues[order[0]].max(0.0) / trace,
        if d > 1 { eig.eigenvalues[order[1]].max(0.0) / trace } else { 0.0 },
    ];
    let coords = centered
        .chunks_exact(d)
        .map(|row| {
            let p = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca2d {
        coords,
        explained,
        components,
    })
}
