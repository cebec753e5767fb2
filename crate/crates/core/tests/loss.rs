use ecg_contrast::contrastive::{
    idb_total_loss, info_nce, pair_partners, LossConfig, ScoredBatch,
};
use ecg_contrast::nn::gradcheck::grad_check;
use ecg_contrast::nn::{ParamSet, Tensor};
use ecg_contrast::rng::stream;
use ecg_contrast::Error;
use proptest::prelude::*;
use rand::Rng;

/// Direct softmax over cosine similarities, written without the graph.
fn oracle(z: &[Vec<f64>], partner: &[usize], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (cos(&z[i], &z[k]) / tau).exp()).sum();
        let num = (cos(&z[i], &z[partner[i]]) / tau).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

fn random_batch(n_pairs: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = stream(&[seed, 77]);
    (0..2 * n_pairs)
        .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn single_pair_loss_is_zero() {
    let z = vec![vec![1.0, 2.0, -0.5], vec![-3.0, 0.1, 4.0]];
    let l = info_nce(&z, &pair_partners(1), &LossConfig::default()).unwrap();
    assert!(l.abs() < 1e-12, "{l}");
}

#[test]
fn identical_projections_give_log_of_negatives_plus_one() {
    for n in 1..=8usize {
        let z = vec![vec![0.3, -1.2, 2.0]; 2 * n];
        let l = info_nce(&z, &pair_partners(n), &LossConfig::default()).unwrap();
        let expected = ((2 * n - 1) as f64).ln();
        assert!((l - expected).abs() < 1e-9, "n={n}: {l} vs {expected}");
    }
}

#[test]
fn brute_force_oracle_on_random_batches() {
    let mut r = stream(&[5]);
    for case in 0..200u64 {
        let n_pairs = r.gen_range(1..=8);
        let d = r.gen_range(2..=12);
        let tau = r.gen_range(0.05..1.0);
        let z = random_batch(n_pairs, d, case);
        let partner = pair_partners(n_pairs);
        let l = info_nce(&z, &partner, &LossConfig { tau }).unwrap();
        let o = oracle(&z, &partner, tau);
        assert!((l - o).abs() < 1e-9, "case {case}: {l} vs {o}");
    }
}

#[test]
fn idb_total_reduces_to_per_batch_infonce() {
    let cfg = LossConfig::default();
    let batches: Vec<ScoredBatch> = (0..4u64)
        .map(|b| {
            let n = 2 + b as usize;
            ScoredBatch {
                projections: random_batch(n, 5, 100 + b),
                partner: pair_partners(n),
                cohort_ids: vec![b as u16 % 2; 2 * n],
            }
        })
        .collect();
    let idb = idb_total_loss(&batches, &cfg).unwrap();
    let mut total = 0.0;
    let mut views = 0;
    for b in &batches {
        total += info_nce(&b.projections, &b.partner, &cfg).unwrap() * b.projections.len() as f64;
        views += b.projections.len();
    }
    assert_eq!(idb.total, total);
    assert_eq!(idb.mean_per_view, total / views as f64);
    let single = idb_total_loss(&batches[..1], &cfg).unwrap();
    assert_eq!(single.mean_per_view, info_nce(&batches[0].projections, &batches[0].partner, &cfg).unwrap());
}

#[test]
fn mixed_cohort_batch_is_rejected() {
    let b = ScoredBatch {
        projections: random_batch(2, 3, 1),
        partner: pair_partners(2),
        cohort_ids: vec![0, 0, 1, 1],
    };
    assert!(matches!(
        idb_total_loss(&[b], &LossConfig::default()),
        Err(Error::HeterogeneousBatch(ids)) if ids == vec![0, 1]
    ));
}

#[test]
fn zero_vector_is_an_error() {
    let mut z = random_batch(2, 3, 2);
    z[2] = vec![0.0; 3];
    assert!(matches!(
        info_nce(&z, &pair_partners(2), &LossConfig::default()),
        Err(Error::ZeroNorm(2))
    ));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..5u64 {
        let z = random_batch(3, 4, seed);
        let mut p = ParamSet::default();
        p.push("z", Tensor::new(vec![6, 4], z.concat()));
        let partner = pair_partners(3);
        let report = grad_check(&p, 1e-6, |g, b| g.info_nce(b.var("z"), &partner, 0.2)).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}

proptest! {
    #[test]
    fn positive_rescaling_leaves_loss_unchanged(
        seed: u64,
        n_pairs in 1usize..6,
        scales in proptest::collection::vec(0.01f64..100.0, 12),
    ) {
        let z = random_batch(n_pairs, 4, seed);
        let scaled: Vec<Vec<f64>> = z
            .iter()
            .zip(&scales)
            .map(|(v, s)| v.iter().map(|x| x * s).collect())
            .collect();
        let partner = pair_partners(n_pairs);
        let cfg = LossConfig::default();
        let a = info_nce(&z, &partner, &cfg).unwrap();
        let b = info_nce(&scaled, &partner, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn loss_is_bounded_below_by_zero_and_finite(seed: u64, n_pairs in 1usize..8, tau in 0.02f64..2.0) {
        let z = random_batch(n_pairs, 6, seed);
        let l = info_nce(&z, &pair_partners(n_pairs), &LossConfig { tau }).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
