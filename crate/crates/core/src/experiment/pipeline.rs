//! Stages shared by the experiments: synthesis, preprocessing, pretraining,
//! embedding, and head fitting on cached embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::manifest::Workspace;
use crate::contrastive::{
    embed_prepared, prepare, pretrain, read_embeddings, write_embeddings, EmbeddingSet,
    PreparedSet, PretrainConfig,
};
use crate::datamodel::{open_store, RecordMeta, Store};
use crate::error::{Error, Result};
use crate::nn::head::{train_head, Head, HeadConfig, Task};
use crate::nn::{EncoderConfig, EncoderParams};
use crate::rng;
use crate::signal::{AugmentConfig, PreprocessConfig};
use crate::syncohort::{generate_cohort, CohortSpec};

/// Synthesizes (or reuses) one store per cohort.
pub fn synth_stage(ws: &mut Workspace, specs: &[CohortSpec]) -> Result<Vec<Store>> {
    specs
        .iter()
        .map(|spec| {
            let name = format!("store/{}", spec.cohort_id);
            let rel = format!("stores/cohort{}.ecgc", spec.cohort_id);
            let path = ws.stage(&name, &rel, |p| generate_cohort(spec, p).map(|_| ()))?;
            open_store(path)
        })
        .collect()
}

/// Preprocesses every labeled record of each cohort, notching at that
/// cohort's mains frequency.
pub fn prepare_cohorts(
    stores: &[Store],
    specs: &[CohortSpec],
    pre: &PreprocessConfig,
) -> Result<Vec<PreparedSet>> {
    stores
        .iter()
        .zip(specs)
        .map(|(store, spec)| {
            let cfg = PreprocessConfig {
                mains: spec.device.mains_hz,
                ..pre.clone()
            };
            let set = prepare(store, &cfg, |_| true)?;
            log::info!(
                "cohort {} ({}): {} records prepared, {} skipped",
                spec.cohort_id,
                spec.name,
                set.len(),
                set.skipped
            );
            Ok(set)
        })
        .collect()
}

pub fn has_labels(m: &RecordMeta) -> bool {
    m.age.is_some() && m.sex.label().is_some()
}

/// Trains (or reuses) an encoder; the checkpoint and a per-epoch loss CSV
/// become manifest artifacts.
pub fn pretrain_stage(
    ws: &mut Workspace,
    name: &str,
    data: &PreparedSet,
    cfg: &PretrainConfig,
    enc: &EncoderConfig,
    aug: &AugmentConfig,
) -> Result<EncoderParams<f32>> {
    let mut losses: Option<Vec<f64>> = None;
    let ckpt = ws.stage(
        &format!("checkpoint/{name}"),
        &format!("checkpoints/{name}.nnp"),
        |p| {
            log::info!("pretraining {name} on {} records", data.len());
            let out = pretrain(data, cfg, enc, aug)?;
            out.params.save(p, enc)?;
            losses = Some(out.epoch_losses);
            Ok(())
        },
    )?;
    ws.stage(&format!("losses/{name}"), &format!("losses/{name}.csv"), |p| {
        let losses = losses
            .as_ref()
            .ok_or_else(|| Error::Config(format!("loss log for {name} is missing; rerun without resume")))?;
        let mut text = String::from("epoch,loss\n");
        for (e, l) in losses.iter().enumerate() {
            text.push_str(&format!("{},{l:.6}\n", e + 1));
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))
    })?;
    EncoderParams::load(&ckpt, enc)
}

/// Embeds (or reuses embeddings of) every record in `data`.
pub fn embed_stage(
    ws: &mut Workspace,
    name: &str,
    enc: &EncoderConfig,
    params: &EncoderParams<f32>,
    data: &PreparedSet,
) -> Result<EmbeddingSet> {
    let path = ws.stage(
        &format!("embeddings/{name}"),
        &format!("embeddings/{name}.emb"),
        |p| {
            let ids: Vec<u64> = data.metas.iter().map(|m| m.record_id).collect();
            write_embeddings(&embed_prepared(enc, params, data, &ids)?, p)
        },
    )?;
    read_embeddings(&path)
}

/// Record-id lookup into an [`EmbeddingSet`].
pub struct EmbIndex<'a> {
    pub set: &'a EmbeddingSet,
    pos: HashMap<u64, usize>,
}

impl<'a> EmbIndex<'a> {
    pub fn new(set: &'a EmbeddingSet) -> Self {
        EmbIndex {
            set,
            pos: set.entries.iter().enumerate().map(|(i, e)| (e.record_id, i)).collect(),
        }
    }

    fn rows(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.pos
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("record {id} has no embedding")))
            })
            .collect()
    }

    pub fn features(&self, ids: &[u64]) -> Result<Vec<&[f32]>> {
        Ok(self.rows(ids)?.into_iter().map(|i| self.set.entries[i].values.as_slice()).collect())
    }

    pub fn cohorts(&self, ids: &[u64]) -> Result<Vec<u16>> {
        Ok(self.rows(ids)?.into_iter().map(|i| self.set.entries[i].cohort_id).collect())
    }

    /// Age in years or 1.0 for male / 0.0 for female.
    pub fn targets(&self, ids: &[u64], task: Task) -> Result<Vec<f64>> {
        self.rows(ids)?
            .into_iter()
            .map(|i| {
                let e = &self.set.entries[i];
                let v = match task {
                    Task::AgeRegression => e.age.map(|a| a as f64),
                    Task::SexClassification => e.sex.label().map(|m| if m { 1.0 } else { 0.0 }),
                };
                v.ok_or_else(|| Error::Config(format!("record {} lacks a label", e.record_id)))
            })
            .collect()
    }
}

/// Trains a head on `train` ids with model selection on `val` ids.
pub fn fit_head(
    emb: &EmbIndex,
    train: &[u64],
    val: &[u64],
    task: Task,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<Head> {
    let ids: Vec<u64> = train.iter().chain(val).copied().collect();
    let features: Vec<Vec<f32>> = emb.features(&ids)?.into_iter().map(<[f32]>::to_vec).collect();
    let targets = emb.targets(&ids, task)?;
    let tr: Vec<usize> = (0..train.len()).collect();
    let va: Vec<usize> = (train.len()..ids.len()).collect();
    Ok(train_head(&features, &targets, task, cfg, &tr, &va, seed)?.head)
}

/// Up to `n` ids drawn without replacement, returned sorted.
pub fn subsample(ids: &[u64], n: usize, seed: u64) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.shuffle(&mut rng::stream(&[seed, 0x5ab5]));
    v.truncate(n);
    v.sort_unstable();
    v
}
