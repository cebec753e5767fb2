//! The contrastive pretraining loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{make_batches, pair_partners, sample_epoch_pairs, BatchMode, LossConfig, Pair};
use crate::datamodel::{build_patient_index_from, RecordMeta, Store};
use crate::error::{Error, Result};
use crate::nn::model::batch_tensor;
use crate::nn::{
    adam_step, cosine_lr, encoder_forward, projection_forward, AdamState, EncoderConfig,
    EncoderParams, Graph, Mode,
};
use crate::rng;
use crate::signal::{make_view_pair, preprocess_record, AugmentConfig, LeadMatrix, PreprocessConfig};

const STREAM_INIT: u64 = 1;
const STREAM_PLAN: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_VIEW: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Positive pairs per batch; a batch holds twice as many views.
    pub batch_pairs: usize,
    pub epochs: usize,
    /// Initial learning rate of the cosine schedule.
    pub eta0: f64,
    pub mode: BatchMode,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_pairs: 512,
            epochs: 40,
            eta0: 0.1,
            mode: BatchMode::Random,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_pairs and epochs must be positive".into()));
        }
        if !(self.eta0 > 0.0) || !(self.loss.tau > 0.0) {
            return Err(Error::Config("eta0 and tau must be positive".into()));
        }
        Ok(())
    }
}

/// Preprocessed windows keyed by record id, with the headers of every
/// record that survived preprocessing.
#[derive(Debug, Clone, Default)]
pub struct PreparedSet {
    pub windows: BTreeMap<u64, LeadMatrix>,
    pub metas: Vec<RecordMeta>,
    /// Records dropped because they were too short.
    pub skipped: usize,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// Subset restricted to records passing `keep`.
    pub fn filter(&self, keep: impl Fn(&RecordMeta) -> bool) -> PreparedSet {
        let metas: Vec<RecordMeta> = self.metas.iter().filter(|m| keep(m)).copied().collect();
        PreparedSet {
            windows: metas
                .iter()
                .map(|m| (m.record_id, self.windows[&m.record_id].clone()))
                .collect(),
            metas,
            skipped: self.skipped,
        }
    }

    pub fn merge(sets: impl IntoIterator<Item = PreparedSet>) -> PreparedSet {
        let mut out = PreparedSet::default();
        for s in sets {
            out.windows.extend(s.windows);
            out.metas.extend(s.metas);
            out.skipped += s.skipped;
        }
        out
    }
}

/// Preprocesses every record of `store` passing `keep`; records too short
/// for the window are skipped and counted.
pub fn prepare(
    store: &Store,
    pre: &PreprocessConfig,
    keep: impl Fn(&RecordMeta) -> bool,
) -> Result<PreparedSet> {
    pre.validate()?;
    let mut out = PreparedSet::default();
    for (i, meta) in store.metas().iter().enumerate() {
        if !keep(meta) {
            continue;
        }
        let record = store.get(i)?;
        match preprocess_record(&record, pre) {
            Ok(t) => {
                out.windows.insert(meta.record_id, t.values);
                out.metas.push(*meta);
            }
            Err(Error::TooShort { record_id, .. }) => {
                log::warn!("skipping record {record_id}: shorter than the window");
                out.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams<f32>,
    /// Mean per-view loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn build_views(
    data: &PreparedSet,
    batch: &[Pair],
    aug: &AugmentConfig,
    seed: u64,
    epoch: usize,
    batch_idx: usize,
) -> Result<Vec<LeadMatrix>> {
    let mut views = Vec::with_capacity(2 * batch.len());
    for (k, p) in batch.iter().enumerate() {
        let mut r = rng::stream(&[seed, STREAM_VIEW, epoch as u64, batch_idx as u64, k as u64]);
        let (a, b) = make_view_pair(&data.windows[&p.record_a], &data.windows[&p.record_b], aug, &mut r)?;
        views.push(a);
        views.push(b);
    }
    Ok(views)
}

/// Trains encoder and projection with InfoNCE on patient pairs.
pub fn pretrain(
    data: &PreparedSet,
    cfg: &PretrainConfig,
    enc_cfg: &EncoderConfig,
    aug: &AugmentConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    aug.validate()?;
    let index = build_patient_index_from(data.metas.iter(), true)?;
    let plan_for = |epoch: usize| -> Result<Vec<Vec<Pair>>> {
        let plan = sample_epoch_pairs(&index, &mut rng::stream(&[cfg.seed, STREAM_PLAN, epoch as u64]))?;
        make_batches(
            &plan,
            cfg.mode,
            cfg.batch_pairs,
            &mut rng::stream(&[cfg.seed, STREAM_BATCH, epoch as u64]),
        )
    };
    let per_epoch = plan_for(0)?.len() as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut params = EncoderParams::<f32>::init(enc_cfg, rng::derive_seed(&[cfg.seed, STREAM_INIT]))?;
    let mut adam = AdamState::new(&params.params);
    let partners = pair_partners(cfg.batch_pairs);
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = plan_for(epoch)?;
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let views = build_views(data, batch, aug, cfg.seed, epoch, bi)?;
            let refs: Vec<&[f32]> = views.iter().map(LeadMatrix::as_lead_major).collect();
            let n_leads = views[0].n_leads();
            let mut g = Graph::<f32>::new();
            let bound = params.params.bind(&mut g);
            let x = g.input(batch_tensor(&refs, n_leads, aug.crop_len)?);
            let out = encoder_forward(enc_cfg, &params, &bound, &mut g, x, Mode::Train)?;
            let z = projection_forward(enc_cfg, &bound, &mut g, out.embedding)?;
            let loss = g.info_nce(z, &partners, cfg.loss.tau as f32)?;
            let value = g.value(loss).data[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &params.params.names);
            let lr = cosine_lr(step, total, cfg.eta0)?;
            adam_step(&mut adam, &mut params.params, &pg, lr)?;
            params.update_running_stats(&out.batch_stats, enc_cfg.bn_momentum);
            step += 1;
            sum += value;
        }
        let mean = sum / batches.len() as f64;
        log::info!(
            "epoch {}/{} ({} mode): loss {mean:.4}",
            epoch + 1,
            cfg.epochs,
            cfg.mode.as_str()
        );
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        params,
        epoch_losses,
        steps: step,
    })
}
