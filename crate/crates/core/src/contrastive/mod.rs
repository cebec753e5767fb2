//! Patient-pair sampling, random vs in-distribution batching, the InfoNCE
//! loss and its per-cohort total, pretraining and embedding export.

pub mod embed;
pub mod pretrain;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::PatientIndex;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::nn::Tensor;

pub use embed::{embed, embed_prepared, read_embeddings, write_embeddings, EmbeddingEntry, EmbeddingSet};
pub use pretrain::{pretrain, prepare, PreparedSet, PretrainConfig, PretrainOutcome};

/// Two distinct records of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub patient_id: u64,
    pub record_a: u64,
    pub record_b: u64,
    pub cohort_id: u16,
}

/// One epoch's positive pairs, in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    pub pairs: Vec<Pair>,
}

/// Draws two distinct records per patient with at least two, then shuffles.
pub fn sample_epoch_pairs<R: Rng + ?Sized>(index: &PatientIndex, rng: &mut R) -> Result<PairPlan> {
    let mut pairs = Vec::with_capacity(index.len());
    for (&patient_id, entry) in &index.patients {
        if entry.record_ids.len() < 2 {
            continue;
        }
        let picked = rand::seq::index::sample(rng, entry.record_ids.len(), 2);
        pairs.push(Pair {
            patient_id,
            record_a: entry.record_ids[picked.index(0)],
            record_b: entry.record_ids[picked.index(1)],
            cohort_id: entry.cohort_id,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no patient with two or more records".into()));
    }
    pairs.shuffle(rng);
    Ok(PairPlan { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Cohorts mixed freely within a batch.
    Random,
    /// Every batch drawn from a single cohort.
    Idb,
}

impl BatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::Random => "random",
            BatchMode::Idb => "idb",
        }
    }
}

impl std::str::FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BatchMode::Random),
            "idb" => Ok(BatchMode::Idb),
            other => Err(Error::Config(format!("unknown batching mode {other:?}"))),
        }
    }
}

/// Splits a plan into batches of `batch_pairs` pairs, dropping partial ones.
///
/// Random mode chunks the (already shuffled) plan in order. Idb mode chunks
/// each cohort's pairs separately and interleaves the chunks, picking the
/// next cohort with probability proportional to its remaining pairs.
pub fn make_batches<R: Rng + ?Sized>(
    plan: &PairPlan,
    mode: BatchMode,
    batch_pairs: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Pair>>> {
    if plan.pairs.is_empty() {
        return Err(Error::Empty("pair plan".into()));
    }
    if batch_pairs == 0 {
        return Err(Error::Config("batch_pairs must be positive".into()));
    }
    match mode {
        BatchMode::Random => {
            if plan.pairs.len() < batch_pairs {
                return Err(Error::Insufficient(format!(
                    "{} pairs cannot fill a batch of {batch_pairs}",
                    plan.pairs.len()
                )));
            }
            Ok(plan
                .pairs
                .chunks_exact(batch_pairs)
                .map(<[Pair]>::to_vec)
                .collect())
        }
        BatchMode::Idb => {
            let mut by_cohort: BTreeMap<u16, Vec<Pair>> = BTreeMap::new();
            for p in &plan.pairs {
                by_cohort.entry(p.cohort_id).or_default().push(*p);
            }
            if let Some((&cohort_id, pairs)) = by_cohort.iter().find(|(_, v)| v.len() < batch_pairs) {
                return Err(Error::CohortTooSmall {
                    cohort_id,
                    available: pairs.len(),
                    batch_pairs,
                });
            }
            let mut queues: Vec<(u16, std::vec::IntoIter<Vec<Pair>>, usize)> = by_cohort
                .into_iter()
                .map(|(c, v)| {
                    let chunks: Vec<Vec<Pair>> =
                        v.chunks_exact(batch_pairs).map(<[Pair]>::to_vec).collect();
                    let n = chunks.len();
                    (c, chunks.into_iter(), n)
                })
                .collect();
            let mut out = Vec::new();
            loop {
                let remaining: usize = queues.iter().map(|q| q.2).sum();
                if remaining == 0 {
                    break;
                }
                let mut pick = if queues.iter().filter(|q| q.2 > 0).count() > 1 {
                    rng.gen_range(0..remaining)
                } else {
                    0
                };
                let q = queues
                    .iter_mut()
                    .find(|q| {
                        if pick < q.2 {
                            true
                        } else {
                            pick -= q.2;
                            false
                        }
                    })
                    .expect("pick within remaining");
                q.2 -= 1;
                out.push(q.1.next().expect("counted chunk"));
            }
            Ok(out)
        }
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {} dimensions", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Partner indices for views laid out as `[a0, b0, a1, b1, ...]`.
pub fn pair_partners(n_pairs: usize) -> Vec<usize> {
    (0..2 * n_pairs).map(|i| i ^ 1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.1 }
    }
}

fn to_tensor(z: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let d = z.first().map_or(0, Vec::len);
    if d == 0 || z.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("projections must be non-empty rows of equal length".into()));
    }
    Ok(Tensor::new(vec![z.len(), d], z.concat()))
}

/// Mean InfoNCE over all views; `partner[i]` is the positive of view `i`.
pub fn info_nce(z: &[Vec<f64>], partner: &[usize], cfg: &LossConfig) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::Empty("InfoNCE needs at least one pair".into()));
    }
    let mut g = Graph::new();
    let zv = g.input(to_tensor(z)?);
    let loss = g.info_nce(zv, partner, cfg.tau)?;
    Ok(g.value(loss).data[0])
}

/// Projections of one batch with their pairing and per-view cohorts.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub projections: Vec<Vec<f64>>,
    pub partner: Vec<usize>,
    pub cohort_ids: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdbLoss {
    /// Sum over batches of per-batch summed view losses.
    pub total: f64,
    /// `total` divided by the number of views.
    pub mean_per_view: f64,
}

/// Total loss over single-cohort batches; each batch's term is the InfoNCE
/// sum over its views.
pub fn idb_total_loss(batches: &[ScoredBatch], cfg: &LossConfig) -> Result<IdbLoss> {
    let mut total = 0.0;
    let mut views = 0usize;
    for b in batches {
        let mut ids = b.cohort_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() > 1 {
            return Err(Error::HeterogeneousBatch(ids));
        }
        if b.cohort_ids.len() != b.projections.len() {
            return Err(Error::Shape("one cohort id per view required".into()));
        }
        total += info_nce(&b.projections, &b.partner, cfg)? * b.projections.len() as f64;
        views += b.projections.len();
    }
    if views == 0 {
        return Err(Error::Empty("no batches".into()));
    }
    Ok(IdbLoss {
        total,
        mean_per_view: total / views as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::PatientEntry;
    use crate::rng::stream;

    fn index(spec: &[(u64, u16, usize)]) -> PatientIndex {
        let mut idx = PatientIndex::default();
        for &(pid, cohort_id, n) in spec {
            idx.patients.insert(
                pid,
                PatientEntry {
                    cohort_id,
                    record_ids: (0..n as u64).map(|k| pid * 100 + k).collect(),
                },
            );
        }
        idx
    }

    #[test]
    fn pairs_are_distinct_records_of_the_patient() {
        let idx = index(&[(1, 0, 2), (2, 0, 1), (3, 1, 5)]);
        let plan = sample_epoch_pairs(&idx, &mut stream(&[1])).unwrap();
        assert_eq!(plan.pairs.len(), 2);
        for p in &plan.pairs {
            assert_ne!(p.record_a, p.record_b);
            assert_eq!(p.record_a / 100, p.patient_id);
            assert_eq!(p.record_b / 100, p.patient_id);
        }
        let two = plan.pairs.iter().find(|p| p.patient_id == 1).unwrap();
        let mut ab = [two.record_a, two.record_b];
        ab.sort_unstable();
        assert_eq!(ab, [100, 101]);
        assert_eq!(plan, sample_epoch_pairs(&idx, &mut stream(&[1])).unwrap());
        assert!(sample_epoch_pairs(&index(&[(5, 0, 1)]), &mut stream(&[1])).is_err());
    }

    #[test]
    fn idb_batches_are_homogeneous() {
        let spec: Vec<(u64, u16, usize)> = (0..90).map(|p| (p, (p % 3) as u16, 2)).collect();
        let plan = sample_epoch_pairs(&index(&spec), &mut stream(&[2])).unwrap();
        let batches = make_batches(&plan, BatchMode::Idb, 8, &mut stream(&[3])).unwrap();
        assert_eq!(batches.len(), 9);
        for b in &batches {
            assert_eq!(b.len(), 8);
            assert!(b.iter().all(|p| p.cohort_id == b[0].cohort_id));
        }
        let err = make_batches(&plan, BatchMode::Idb, 31, &mut stream(&[3]));
        assert!(matches!(err, Err(Error::CohortTooSmall { available: 30, .. })));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let z = vec![vec![0.2, 1.0, -0.3], vec![-4.0, 0.1, 0.0]];
        assert_eq!(info_nce(&z, &pair_partners(1), &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn heterogeneous_batch_is_rejected() {
        let b = ScoredBatch {
            projections: vec![vec![1.0, 0.0]; 4],
            partner: pair_partners(2),
            cohort_ids: vec![0, 0, 1, 1],
        };
        assert!(matches!(
            idb_total_loss(&[b], &LossConfig::default()),
            Err(Error::HeterogeneousBatch(ref ids)) if ids == &[0, 1]
        ));
    }
}
