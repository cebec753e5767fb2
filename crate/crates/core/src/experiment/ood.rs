//! Out-of-distribution comparison of random and in-distribution batching:
//! heads trained on one cohort, evaluated on subsets of every cohort.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::Workspace;
use super::pipeline::{
    embed_stage, fit_head, has_labels, prepare_cohorts, pretrain_stage, subsample, synth_stage,
    EmbIndex,
};
use super::{read_json, write_json, CohortInfo};
use crate::contrastive::{BatchMode, PreparedSet, PretrainConfig};
use crate::contrastive::EmbeddingSet;
use crate::datamodel::{make_splits_among, SplitSpec, SplitUnit, Splits};
use crate::nn::head::Head;
use crate::nn::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{
    auroc, binned_mae, ci95, cohort_probe, delong_test, mae, pca2d, wilcoxon_signed_rank, BinTable,
    MetricResult,
};
use crate::nn::head::Task;
use crate::rng;

pub const HEAD_SPLIT: (f64, f64, f64) = (0.5, 0.1, 0.4);
pub const ENCODERS: [BatchMode; 2] = [BatchMode::Random, BatchMode::Idb];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetric {
    pub encoder: String,
    pub cohort: u16,
    pub mae: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortP {
    pub cohort: u16,
    /// `None` when the test is undefined, e.g. identical inputs.
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEntry {
    pub encoder: String,
    pub cohort: u16,
    pub table: BinTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRun {
    pub run: usize,
    pub seed: u64,
    pub metrics: Vec<OodMetric>,
    /// DeLong p per cohort comparing the two encoders' sex scores.
    pub delong: Vec<CohortP>,
    /// Age-binned errors, recorded for the first run only.
    pub bins: Vec<BinEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub encoder: String,
    pub score: f64,
    pub explained: [f64; 2],
    /// PCA coordinate CSV, relative to the output directory.
    pub pca_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSummary {
    pub encoder: String,
    /// Mean over runs on the head cohort's test subset.
    pub id_mae: f64,
    pub id_auroc: f64,
    /// Mean over runs and over the other cohorts.
    pub ood_mae: f64,
    pub ood_auroc: f64,
    pub degradation: f64,
    /// Per-run mean over all cohorts, summarized over runs.
    pub row_mae: MetricResult,
    pub row_auroc: MetricResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResults {
    pub encoders: Vec<String>,
    pub cohorts: Vec<CohortInfo>,
    pub head_cohort: u16,
    pub runs: usize,
    pub subset_size: usize,
    /// `[encoder][cohort]`.
    pub mae: Vec<Vec<MetricResult>>,
    pub auroc: Vec<Vec<MetricResult>>,
    pub wilcoxon_mae: Vec<CohortP>,
    /// Median over runs of the per-run DeLong p.
    pub delong_auroc: Vec<CohortP>,
    pub summary: Vec<EncoderSummary>,
    pub probe: Vec<ProbeEntry>,
    pub bins: Vec<BinEntry>,
}

impl OodResults {
    pub fn summary_for(&self, encoder: &str) -> Option<&EncoderSummary> {
        self.summary.iter().find(|s| s.encoder == encoder)
    }

    pub fn probe_for(&self, encoder: &str) -> Option<&ProbeEntry> {
        self.probe.iter().find(|p| p.encoder == encoder)
    }
}

/// Prepared cohorts and the head cohort's split, shared by every stage.
pub struct OodData {
    pub cohorts: Vec<CohortInfo>,
    /// Position of the head cohort in `cohorts`.
    pub head: usize,
    pub prepared: Vec<PreparedSet>,
    pub split: Splits,
}

impl OodData {
    /// Synthesizes (or reuses) the stores and draws the head cohort's
    /// patient-level split.
    pub fn load(cfg: &ExperimentConfig, ws: &mut Workspace) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.cohorts.resolve()?;
        let cohorts: Vec<CohortInfo> = specs.iter().map(CohortInfo::from).collect();
        let head = cohorts
            .iter()
            .position(|c| c.id == cfg.head_cohort)
            .ok_or_else(|| Error::Config(format!("head cohort {} is not configured", cfg.head_cohort)))?;
        let stores = synth_stage(ws, &specs)?;
        let prepared = prepare_cohorts(&stores, &specs, &cfg.preprocess)?;
        let (tr, va, te) = HEAD_SPLIT;
        let spec = SplitSpec::fractions(tr, va, te, rng::derive_seed(&[cfg.seed, 0x5911]))
            .with_unit(SplitUnit::Patient);
        let split = make_splits_among(&prepared[head].metas, &spec, has_labels)?;
        if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
            return Err(Error::Insufficient(format!(
                "head cohort {} has too few labeled records",
                cfg.head_cohort
            )));
        }
        Ok(OodData {
            cohorts,
            head,
            prepared,
            split,
        })
    }

    pub fn union(&self) -> PreparedSet {
        PreparedSet::merge(self.prepared.iter().cloned())
    }

    /// The union without the head cohort's test records.
    pub fn pretrain_set(&self) -> PreparedSet {
        let held_out: HashSet<u64> = self.split.test.iter().copied().collect();
        PreparedSet::merge(
            self.prepared
                .iter()
                .map(|s| s.filter(|m| !held_out.contains(&m.record_id))),
        )
    }
}

/// Pretrains (or reuses) the union encoder for one batching mode and embeds
/// every cohort with it.
pub fn ood_encoder(
    ws: &mut Workspace,
    cfg: &ExperimentConfig,
    data: &OodData,
    mode: BatchMode,
) -> Result<(EncoderParams<f32>, EmbeddingSet)> {
    let name = mode.as_str();
    let pcfg = PretrainConfig {
        mode,
        seed: rng::derive_seed(&[cfg.seed, 0x9e7]),
        ..cfg.pretrain.clone()
    };
    let params = pretrain_stage(ws, name, &data.pretrain_set(), &pcfg, &cfg.encoder, &cfg.augment)?;
    let emb = embed_stage(ws, name, &cfg.encoder, &params, &data.union())?;
    Ok((params, emb))
}

/// Age and sex heads trained on the head cohort's split.
pub fn ood_heads(cfg: &ExperimentConfig, split: &Splits, emb: &EmbIndex, seed: u64) -> Result<(Head, Head)> {
    let age_seed = rng::derive_seed(&[seed, Task::AgeRegression as u64]);
    let sex_seed = rng::derive_seed(&[seed, Task::SexClassification as u64]);
    let age = fit_head(emb, &split.train, &split.val, Task::AgeRegression, &cfg.heads.age, age_seed)?;
    let sex = fit_head(emb, &split.train, &split.val, Task::SexClassification, &cfg.heads.sex, sex_seed)?;
    Ok((age, sex))
}

pub fn run_ood(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<OodResults> {
    let mut ws = Workspace::open(out, cfg, resume)?;
    let data = OodData::load(cfg, &mut ws)?;
    let OodData {
        cohorts,
        head: h,
        prepared,
        split,
    } = &data;
    let h = *h;
    let encoders: Vec<String> = ENCODERS.iter().map(|m| m.as_str().to_string()).collect();
    let mut embeddings = Vec::new();
    for mode in ENCODERS {
        embeddings.push(ood_encoder(&mut ws, cfg, &data, mode)?.1);
    }
    let indices: Vec<EmbIndex> = embeddings.iter().map(EmbIndex::new).collect();

    // Evaluation pools: the head cohort's test split, every labeled record elsewhere.
    let pools: Vec<Vec<u64>> = prepared
        .iter()
        .enumerate()
        .map(|(ci, set)| {
            if ci == h {
                split.test.clone()
            } else {
                set.metas.iter().filter(|m| has_labels(m)).map(|m| m.record_id).collect()
            }
        })
        .collect();
    let subset_size = cfg.ood_subset();

    let mut runs = Vec::with_capacity(cfg.runs());
    for r in 0..cfg.runs() {
        let seed = cfg.run_seed(r);
        let path = ws.stage(&format!("run/{r}"), &format!("runs/run{r}.json"), |p| {
            let subsets: Vec<Vec<u64>> = pools.iter().map(|pool| subsample(pool, subset_size, seed)).collect();
            let mut metrics = Vec::new();
            let mut bins = Vec::new();
            // sex scores per encoder per cohort, for the paired AUROC test
            let mut scores: Vec<Vec<Vec<f64>>> = Vec::new();
            for (e, emb) in indices.iter().enumerate() {
                let (age, sex) = ood_heads(cfg, split, emb, seed)?;
                let mut per_cohort = Vec::new();
                for (ci, ids) in subsets.iter().enumerate() {
                    let x = emb.features(ids)?;
                    let ages = emb.targets(ids, Task::AgeRegression)?;
                    let labels = sex_labels(&emb.targets(ids, Task::SexClassification)?);
                    let pred = age.predict(&x)?;
                    let logit = sex.predict(&x)?;
                    let m = OodMetric {
                        encoder: encoders[e].clone(),
                        cohort: cohorts[ci].id,
                        mae: mae(&pred, &ages)?,
                        auroc: auroc(&logit, &labels)?,
                    };
                    log::info!(
                        "run {r}: {} on {}: MAE {:.3}, AUROC {:.3}",
                        m.encoder,
                        cohorts[ci].name,
                        m.mae,
                        m.auroc
                    );
                    metrics.push(m);
                    if r == 0 {
                        bins.push(BinEntry {
                            encoder: encoders[e].clone(),
                            cohort: cohorts[ci].id,
                            table: binned_mae(&pred, &ages, cfg.bin_width)?,
                        });
                    }
                    per_cohort.push(logit);
                }
                scores.push(per_cohort);
            }
            let mut delong = Vec::new();
            for (ci, ids) in subsets.iter().enumerate() {
                let labels = sex_labels(&indices[0].targets(ids, Task::SexClassification)?);
                let p = match delong_test(&scores[0][ci], &scores[1][ci], &labels) {
                    Ok(d) => Some(d.p),
                    Err(Error::DegenerateVariance) => None,
                    Err(e) => return Err(e),
                };
                delong.push(CohortP {
                    cohort: cohorts[ci].id,
                    p,
                });
            }
            write_json(
                p,
                &OodRun {
                    run: r,
                    seed,
                    metrics,
                    delong,
                    bins,
                },
            )
        })?;
        runs.push(read_json::<OodRun>(&path)?);
    }

    // Probe and PCA on the same per-cohort sample for both encoders.
    let probe_seed = rng::derive_seed(&[cfg.seed, 0x9b0e]);
    let probe_ids: Vec<u64> = prepared
        .iter()
        .flat_map(|set| {
            let ids: Vec<u64> = set.metas.iter().map(|m| m.record_id).collect();
            subsample(&ids, cfg.probe_per_cohort, probe_seed)
        })
        .collect();
    let mut probe = Vec::new();
    for (e, emb) in indices.iter().enumerate() {
        let name = &encoders[e];
        let x: Vec<Vec<f32>> = emb.features(&probe_ids)?.into_iter().map(<[f32]>::to_vec).collect();
        let c = emb.cohorts(&probe_ids)?;
        let pca_rel = format!("pca/{name}.csv");
        ws.stage(&format!("pca/{name}"), &pca_rel, |p| {
            let pca = pca2d(&x)?;
            let mut csv = String::from("record_id,cohort_id,pc1,pc2\n");
            for ((id, cohort), xy) in probe_ids.iter().zip(&c).zip(&pca.coords) {
                csv.push_str(&format!("{id},{cohort},{:.6},{:.6}\n", xy[0], xy[1]));
            }
            std::fs::write(p, csv).map_err(|e| Error::io(p, e))
        })?;
        let probe_path = ws.stage(&format!("probe/{name}"), &format!("probe/{name}.json"), |p| {
            let score = cohort_probe(&x, &c, probe_seed)?;
            log::info!("{name}: cohort probe {score:.3}");
            write_json(
                p,
                &ProbeEntry {
                    encoder: name.clone(),
                    score,
                    explained: pca2d(&x)?.explained,
                    pca_csv: pca_rel.clone(),
                },
            )
        })?;
        probe.push(read_json::<ProbeEntry>(&probe_path)?);
    }

    let results = aggregate(cfg, &encoders, &cohorts, h, subset_size, &runs, probe)?;
    ws.stage("results", "ood_results.json", |p| write_json(p, &results))?;
    Ok(results)
}

fn sex_labels(t: &[f64]) -> Vec<bool> {
    t.iter().map(|&v| v > 0.5).collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn aggregate(
    cfg: &ExperimentConfig,
    encoders: &[String],
    cohorts: &[CohortInfo],
    h: usize,
    subset_size: usize,
    runs: &[OodRun],
    probe: Vec<ProbeEntry>,
) -> Result<OodResults> {
    let values = |e: &str, c: u16, f: fn(&OodMetric) -> f64| -> Vec<f64> {
        runs.iter()
            .flat_map(|r| r.metrics.iter().filter(|m| m.encoder == e && m.cohort == c).map(f))
            .collect()
    };
    let table = |f: fn(&OodMetric) -> f64, metric: &str| -> Result<Vec<Vec<MetricResult>>> {
        encoders
            .iter()
            .map(|e| {
                cohorts
                    .iter()
                    .map(|c| ci95(&format!("{metric}:{e}:{}", c.name), &values(e, c.id, f)))
                    .collect()
            })
            .collect()
    };
    let mae_t = table(|m| m.mae, "mae")?;
    let auc_t = table(|m| m.auroc, "auroc")?;

    let mut wilcoxon_mae = Vec::new();
    let mut delong_auroc = Vec::new();
    for c in cohorts {
        let a = values(&encoders[0], c.id, |m| m.mae);
        let b = values(&encoders[1], c.id, |m| m.mae);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let p = match wilcoxon_signed_rank(&diffs) {
            Ok(p) => Some(p),
            Err(Error::AllZero) => None,
            Err(e) => return Err(e),
        };
        wilcoxon_mae.push(CohortP { cohort: c.id, p });
        let mut ps: Vec<f64> = runs
            .iter()
            .flat_map(|r| r.delong.iter().filter(|d| d.cohort == c.id).filter_map(|d| d.p))
            .collect();
        delong_auroc.push(CohortP {
            cohort: c.id,
            p: median(&mut ps),
        });
    }

    let n_other = (cohorts.len() - 1) as f64;
    let summary = encoders
        .iter()
        .enumerate()
        .map(|(e, name)| {
            let other = |t: &Vec<Vec<MetricResult>>| -> f64 {
                t[e].iter().enumerate().filter(|(ci, _)| *ci != h).map(|(_, m)| m.value).sum::<f64>() / n_other
            };
            let row = |t: &Vec<Vec<MetricResult>>, metric: &str| -> Result<MetricResult> {
                let per_run: Vec<f64> = (0..runs.len())
                    .map(|r| t[e].iter().map(|m| m.runs[r]).sum::<f64>() / cohorts.len() as f64)
                    .collect();
                ci95(&format!("{metric}:{name}:mean"), &per_run)
            };
            let id_mae = mae_t[e][h].value;
            let ood_mae = other(&mae_t);
            Ok(EncoderSummary {
                encoder: name.clone(),
                id_mae,
                id_auroc: auc_t[e][h].value,
                ood_mae,
                ood_auroc: other(&auc_t),
                degradation: ood_mae - id_mae,
                row_mae: row(&mae_t, "mae")?,
                row_auroc: row(&auc_t, "auroc")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bins = runs.first().map(|r| r.bins.clone()).unwrap_or_default();
    Ok(OodResults {
        encoders: encoders.to_vec(),
        cohorts: cohorts.to_vec(),
        head_cohort: cfg.head_cohort,
        runs: runs.len(),
        subset_size,
        mae: mae_t,
        auroc: auc_t,
        wilcoxon_mae,
        delong_auroc,
        summary,
        probe,
        bins,
    })
}
