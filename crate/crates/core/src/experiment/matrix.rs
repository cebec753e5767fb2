//! Pretraining-cohort by label-cohort matrix: one encoder per cohort plus a
//! union encoder, heads trained and tested within each label cohort.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::Workspace;
use super::pipeline::{
    embed_stage, fit_head, has_labels, prepare_cohorts, pretrain_stage, synth_stage, EmbIndex,
};
use super::{read_json, write_json, CohortInfo};
use crate::contrastive::{BatchMode, PreparedSet, PretrainConfig};
use crate::datamodel::{make_splits_among, SplitSpec};
use crate::error::Result;
use crate::eval::{auroc, ci95, kruskal_wallis, mae, MetricResult};
use crate::nn::head::Task;
use crate::rng;

pub const UNION: &str = "union";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub encoder: String,
    pub cohort: u16,
    pub mae: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub run: usize,
    pub seed: u64,
    pub cells: Vec<CellValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KruskalRow {
    pub cohort: u16,
    pub metric: String,
    pub h: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResults {
    pub encoders: Vec<String>,
    pub cohorts: Vec<CohortInfo>,
    pub runs: usize,
    /// `[encoder][cohort]`.
    pub mae: Vec<Vec<MetricResult>>,
    pub auroc: Vec<Vec<MetricResult>>,
    /// Mean over label cohorts of each encoder's cell means.
    pub row_mean_mae: Vec<f64>,
    pub row_mean_auroc: Vec<f64>,
    pub kruskal: Vec<KruskalRow>,
}

impl MatrixResults {
    pub fn encoder_index(&self, name: &str) -> Option<usize> {
        self.encoders.iter().position(|e| e == name)
    }
}

/// Encoder name for a single-cohort encoder.
pub fn single_name(cohort: &CohortInfo) -> String {
    format!("single-{}", cohort.name)
}

pub fn run_matrix(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<MatrixResults> {
    cfg.validate()?;
    let specs = cfg.cohorts.resolve()?;
    let cohorts: Vec<CohortInfo> = specs.iter().map(CohortInfo::from).collect();
    let mut ws = Workspace::open(out, cfg, resume)?;
    let stores = synth_stage(&mut ws, &specs)?;
    let prepared = prepare_cohorts(&stores, &specs, &cfg.preprocess)?;
    let union = PreparedSet::merge(prepared.iter().cloned());

    let mut encoders: Vec<String> = cohorts.iter().map(single_name).collect();
    encoders.push(UNION.to_string());
    let mut embeddings = Vec::with_capacity(encoders.len());
    for (e, name) in encoders.iter().enumerate() {
        let data = prepared.get(e).unwrap_or(&union);
        let pcfg = PretrainConfig {
            mode: BatchMode::Random,
            seed: rng::derive_seed(&[cfg.seed, 0x9e7, e as u64]),
            ..cfg.pretrain.clone()
        };
        let params = pretrain_stage(&mut ws, name, data, &pcfg, &cfg.encoder, &cfg.augment)?;
        embeddings.push(embed_stage(&mut ws, name, &cfg.encoder, &params, &union)?);
    }
    let indices: Vec<EmbIndex> = embeddings.iter().map(EmbIndex::new).collect();

    let (n_train, n_val, n_test) = cfg.split_counts();
    let mut runs = Vec::with_capacity(cfg.runs());
    for r in 0..cfg.runs() {
        let seed = cfg.run_seed(r);
        let path = ws.stage(&format!("run/{r}"), &format!("runs/run{r}.json"), |p| {
            let mut cells = Vec::new();
            for (ci, set) in prepared.iter().enumerate() {
                let cohort = cohorts[ci].id;
                let spec = SplitSpec::counts(n_train, n_val, n_test, rng::derive_seed(&[seed, cohort as u64]));
                let split = make_splits_among(&set.metas, &spec, has_labels)?;
                for (e, emb) in indices.iter().enumerate() {
                    let value = |task: Task| -> Result<f64> {
                        let head_seed = rng::derive_seed(&[seed, cohort as u64, task as u64]);
                        let head = fit_head(emb, &split.train, &split.val, task, cfg.heads.for_task(task), head_seed)?;
                        let pred = head.predict(&emb.features(&split.test)?)?;
                        let truth = emb.targets(&split.test, task)?;
                        match task {
                            Task::AgeRegression => mae(&pred, &truth),
                            Task::SexClassification => {
                                auroc(&pred, &truth.iter().map(|&t| t > 0.5).collect::<Vec<_>>())
                            }
                        }
                    };
                    let cell = CellValue {
                        encoder: encoders[e].clone(),
                        cohort,
                        mae: value(Task::AgeRegression)?,
                        auroc: value(Task::SexClassification)?,
                    };
                    log::info!(
                        "run {r}: {} -> {}: MAE {:.3}, AUROC {:.3}",
                        cell.encoder,
                        cohorts[ci].name,
                        cell.mae,
                        cell.auroc
                    );
                    cells.push(cell);
                }
            }
            write_json(p, &MatrixRun { run: r, seed, cells })
        })?;
        runs.push(read_json::<MatrixRun>(&path)?);
    }

    let results = aggregate(&encoders, &cohorts, &runs)?;
    ws.stage("results", "matrix_results.json", |p| write_json(p, &results))?;
    Ok(results)
}

fn aggregate(encoders: &[String], cohorts: &[CohortInfo], runs: &[MatrixRun]) -> Result<MatrixResults> {
    let values = |e: &str, c: u16, f: fn(&CellValue) -> f64| -> Vec<f64> {
        runs.iter()
            .flat_map(|r| r.cells.iter().filter(|v| v.encoder == e && v.cohort == c).map(f))
            .collect()
    };
    let table = |f: fn(&CellValue) -> f64, metric: &str| -> Result<Vec<Vec<MetricResult>>> {
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
    let mae_t = table(|v| v.mae, "mae")?;
    let auc_t = table(|v| v.auroc, "auroc")?;
    let row_mean = |t: &Vec<Vec<MetricResult>>| -> Vec<f64> {
        t.iter()
            .map(|row| row.iter().map(|m| m.value).sum::<f64>() / row.len() as f64)
            .collect()
    };
    let mut kruskal = Vec::new();
    for c in cohorts {
        for (metric, f) in [("mae", (|v: &CellValue| v.mae) as fn(&CellValue) -> f64), ("auroc", |v| v.auroc)] {
            let groups: Vec<Vec<f64>> = encoders.iter().map(|e| values(e, c.id, f)).collect();
            let kw = kruskal_wallis(&groups)?;
            kruskal.push(KruskalRow {
                cohort: c.id,
                metric: metric.to_string(),
                h: kw.h,
                p: kw.p,
            });
        }
    }
    Ok(MatrixResults {
        encoders: encoders.to_vec(),
        cohorts: cohorts.to_vec(),
        runs: runs.len(),
        row_mean_mae: row_mean(&mae_t),
        row_mean_auroc: row_mean(&auc_t),
        mae: mae_t,
        auroc: auc_t,
        kruskal,
    })
}
